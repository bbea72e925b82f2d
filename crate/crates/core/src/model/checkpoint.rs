//! Checkpoint container: a JSON header describing every tensor followed by
//! raw little-endian payloads, so any language can load it without this
//! crate.
//!
//! Layout: 8-byte magic `RNAF0001`, u64 LE header length, header JSON,
//! then tensor bytes at the offsets the header declares (relative to the
//! end of the header).

use super::{ModelConfig, ModelError, NamedTensor, Weights};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"RNAF0001";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub tensors: Vec<TensorMeta>,
    /// Free-form metadata: training step, validation score, optimizer state
    /// markers. Kept sorted for reproducible bytes.
    pub extra: BTreeMap<String, serde_json::Value>,
}

pub fn save(
    path: &Path,
    model: &ModelConfig,
    tensors: &[NamedTensor<f32>],
    extra: BTreeMap<String, serde_json::Value>,
) -> Result<(), ModelError> {
    let mut metas = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in tensors {
        let byte_len = (t.data.len() * 4) as u64;
        metas.push(TensorMeta {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            offset,
            byte_len,
        });
        offset += byte_len;
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model.clone(),
        tensors: metas,
        extra,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint {
        message: e.to_string(),
    })?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(&header_json).map_err(io_err)?;
    for t in tensors {
        let mut bytes = Vec::with_capacity(t.data.len() * 4);
        for &v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes).map_err(io_err)?;
    }
    file.flush().map_err(io_err)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, Vec<NamedTensor<f32>>), ModelError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint {
            message: "bad magic; not a checkpoint file".into(),
        });
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(io_err)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json).map_err(io_err)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_json).map_err(|e| ModelError::Checkpoint {
            message: format!("header parse failed: {e}"),
        })?;
    if header.format_version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint {
            message: format!("unsupported format version {}", header.format_version),
        });
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(io_err)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        if meta.dtype != "f32" {
            return Err(ModelError::Checkpoint {
                message: format!("tensor '{}': unsupported dtype {}", meta.name, meta.dtype),
            });
        }
        let numel: usize = meta.shape.iter().product();
        if meta.byte_len as usize != numel * 4 {
            return Err(ModelError::Checkpoint {
                message: format!("tensor '{}': byte length does not match shape", meta.name),
            });
        }
        let start = meta.offset as usize;
        let end = start + meta.byte_len as usize;
        if end > payload.len() {
            return Err(ModelError::Checkpoint {
                message: format!("tensor '{}': payload truncated", meta.name),
            });
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(NamedTensor {
            name: meta.name.clone(),
            shape: meta.shape.clone(),
            data,
        });
    }
    Ok((header, tensors))
}

/// Load a checkpoint and split it into validated model weights plus any
/// non-model tensors (optimizer state).
pub fn load_weights(
    path: &Path,
) -> Result<(CheckpointHeader, Weights<f32>, Vec<NamedTensor<f32>>), ModelError> {
    let (header, tensors) = load(path)?;
    let (model_tensors, rest): (Vec<_>, Vec<_>) =
        tensors.into_iter().partition(|t| !t.name.starts_with("opt."));
    let weights = Weights::from_tensors(model_tensors);
    weights.validate_against(&header.model)?;
    Ok((header, weights, rest))
}

fn io_err(e: std::io::Error) -> ModelError {
    ModelError::Checkpoint {
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig {
            model_dim: 8,
            n_layers: 1,
            num_head: 1,
            rel_pos_clip: 4,
            ..ModelConfig::default()
        };
        let weights: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(7));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut extra = BTreeMap::new();
        extra.insert("step".to_string(), serde_json::json!(123));
        save(&path, &cfg, weights.tensors(), extra).unwrap();

        let (header, loaded, rest) = load_weights(&path).unwrap();
        assert_eq!(header.model, cfg);
        assert_eq!(header.extra["step"], serde_json::json!(123));
        assert!(rest.is_empty());
        for (a, b) in weights.tensors().iter().zip(loaded.tensors()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_corrupt_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(load(&path), Err(ModelError::Checkpoint { .. })));
    }

    #[test]
    fn shape_mismatch_detected_on_load() {
        let cfg = ModelConfig {
            model_dim: 8,
            n_layers: 1,
            num_head: 1,
            rel_pos_clip: 4,
            ..ModelConfig::default()
        };
        let mut weights: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(7));
        // sabotage a tensor shape
        weights.tensors_mut()[0].shape = vec![1, 8];
        weights.tensors_mut()[0].data.truncate(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &cfg, weights.tensors(), BTreeMap::new()).unwrap();
        assert!(load_weights(&path).is_err());
    }
}
