//! The axial-attention network over the pairwise latent grid.
//!
//! A sequence is embedded twice and broadcast into an L x L x d grid; a stack
//! of blocks (row-wise axial attention, column-wise axial attention, two-layer
//! 3x3 convolution) refines the grid; recycling re-feeds the latent through
//! the stack with gradients only in the last pass; a linear generator emits
//! two class logits per cell.

pub mod checkpoint;
mod decode;
mod forward;

pub use decode::decode_structure;
pub use forward::{bind, forward_recycled, forward_with_recycle, BoundParams, GridInput, RecycledForward};

use crate::rng::StreamRng;
use crate::tensor::{Scalar, TensorError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Model hyperparameters. Defaults mirror the published training setup at
/// the largest latent width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub num_head: usize,
    pub ff_kernel: usize,
    pub ff_expansion: usize,
    pub cycling: usize,
    pub resi_dropout: f64,
    pub embed_dropout: f64,
    pub relative_position_encoding: bool,
    pub rel_pos_clip: usize,
    pub ln_eps: f64,
    pub initializer_range: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 5,
            max_len: 500,
            model_dim: 256,
            n_layers: 6,
            num_head: 4,
            ff_kernel: 3,
            ff_expansion: 4,
            cycling: 6,
            resi_dropout: 0.1,
            embed_dropout: 0.1,
            relative_position_encoding: true,
            rel_pos_clip: 64,
            ln_eps: 1e-5,
            initializer_range: 0.02,
        }
    }
}

impl ModelConfig {
    /// The published width/head pairing: 256->4, 128->2, 64->1, 32->1.
    pub fn for_dim(model_dim: usize) -> Self {
        let num_head = match model_dim {
            256 => 4,
            128 => 2,
            _ => 1,
        };
        Self {
            model_dim,
            num_head,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_head
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.model_dim == 0 || self.num_head == 0 || self.model_dim % self.num_head != 0 {
            return Err(ModelError::Config {
                message: format!(
                    "model_dim {} must be a positive multiple of num_head {}",
                    self.model_dim, self.num_head
                ),
            });
        }
        if self.cycling < 1 {
            return Err(ModelError::Config {
                message: "cycling must be at least 1".into(),
            });
        }
        if self.ff_kernel != 3 {
            return Err(ModelError::Config {
                message: format!("ff_kernel {} unsupported; convolution is fixed at 3", self.ff_kernel),
            });
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.ff_expansion == 0 {
            return Err(ModelError::Config {
                message: "vocab_size, max_len and ff_expansion must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&self.resi_dropout) || !(0.0..1.0).contains(&self.embed_dropout) {
            return Err(ModelError::Config {
                message: "dropout probabilities must lie in [0, 1)".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Config { message: String },
    InputTooLong { len: usize, max_len: usize },
    UnknownToken { position: usize, token: u32 },
    MissingTensor { name: String },
    Tensor(TensorError),
    Checkpoint { message: String },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config { message } => write!(f, "model config: {message}"),
            Self::InputTooLong { len, max_len } => {
                write!(f, "sequence length {len} exceeds max_len {max_len}")
            }
            Self::UnknownToken { position, token } => {
                write!(f, "token {token} at position {position} outside vocabulary")
            }
            Self::MissingTensor { name } => write!(f, "checkpoint missing tensor '{name}'"),
            Self::Tensor(e) => write!(f, "tensor op failed: {e}"),
            Self::Checkpoint { message } => write!(f, "checkpoint: {message}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

/// A named parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// All trainable parameters in a fixed, deterministic order.
#[derive(Debug, Clone)]
pub struct Weights<T: Scalar> {
    tensors: Vec<NamedTensor<T>>,
    index: BTreeMap<String, usize>,
}

/// Parameter names and shapes for a configuration, in traversal order.
/// Shared by initialization, parameter counting and checkpoint loading.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.model_dim;
    let hidden = cfg.ff_expansion * d;
    let mut specs: Vec<(String, Vec<usize>)> = vec![
        ("embed_row.weight".into(), vec![cfg.vocab_size, d]),
        ("embed_col.weight".into(), vec![cfg.vocab_size, d]),
        ("recycle_norm.gain".into(), vec![d]),
        ("recycle_norm.bias".into(), vec![d]),
    ];
    for layer in 0..cfg.n_layers {
        for attn in ["row_attn", "col_attn"] {
            let p = format!("layers.{layer}.{attn}");
            specs.push((format!("{p}.norm.gain"), vec![d]));
            specs.push((format!("{p}.norm.bias"), vec![d]));
            for proj in ["q", "k", "v", "out"] {
                specs.push((format!("{p}.{proj}.weight"), vec![d, d]));
                specs.push((format!("{p}.{proj}.bias"), vec![d]));
            }
            if cfg.relative_position_encoding {
                specs.push((format!("{p}.rel_bias"), vec![2 * cfg.rel_pos_clip + 1]));
            }
        }
        let p = format!("layers.{layer}");
        specs.push((format!("{p}.conv_norm.gain"), vec![d]));
        specs.push((format!("{p}.conv_norm.bias"), vec![d]));
        specs.push((format!("{p}.conv1.weight"), vec![3, 3, d, hidden]));
        specs.push((format!("{p}.conv1.bias"), vec![hidden]));
        specs.push((format!("{p}.conv2.weight"), vec![3, 3, hidden, d]));
        specs.push((format!("{p}.conv2.bias"), vec![d]));
    }
    specs.push(("generator.weight".into(), vec![d, 2]));
    specs.push(("generator.bias".into(), vec![2]));
    specs
}

/// Exact trainable-parameter count of the instantiated model.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    param_specs(cfg)
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum()
}

/// Whether a parameter is excluded from decoupled weight decay
/// (norm gains and every bias-like vector).
pub fn is_decay_exempt(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gain") || name.ends_with(".rel_bias")
}

impl<T: Scalar> Weights<T> {
    /// Normal(0, initializer_range) init for weights, ones for norm gains,
    /// zeros for biases and relative-position tables.
    pub fn init(cfg: &ModelConfig, rng: &mut StreamRng) -> Self {
        let mut tensors = Vec::new();
        for (name, shape) in param_specs(cfg) {
            let numel: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".gain") {
                vec![T::one(); numel]
            } else if name.ends_with(".bias") || name.ends_with(".rel_bias") {
                vec![T::zero(); numel]
            } else {
                let mut stream = rng.split(&name);
                (0..numel)
                    .map(|_| T::from_f64(stream.normal_f64() * cfg.initializer_range))
                    .collect()
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        Self::from_tensors(tensors)
    }

    pub fn from_tensors(tensors: Vec<NamedTensor<T>>) -> Self {
        let index = tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        Self { tensors, index }
    }

    pub fn tensors(&self) -> &[NamedTensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedTensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Checks the tensor set matches `param_specs(cfg)` exactly.
    pub fn validate_against(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let specs = param_specs(cfg);
        if specs.len() != self.tensors.len() {
            return Err(ModelError::Checkpoint {
                message: format!(
                    "expected {} parameter tensors, found {}",
                    specs.len(),
                    self.tensors.len()
                ),
            });
        }
        for (name, shape) in &specs {
            match self.get(name) {
                None => return Err(ModelError::MissingTensor { name: name.clone() }),
                Some(t) if &t.shape != shape => {
                    return Err(ModelError::Checkpoint {
                        message: format!(
                            "tensor '{name}': expected shape {shape:?}, found {:?}",
                            t.shape
                        ),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Re-instantiate at another precision (used by gradient-check tests).
    pub fn convert<U: Scalar>(&self) -> Weights<U> {
        let tensors = self
            .tensors
            .iter()
            .map(|t| NamedTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: t.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
            })
            .collect();
        Weights::from_tensors(tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_ladder_matches_published_sizes() {
        // ~80 d^2 per block: 0.5M / 2M / 8M / 32M at d = 32 / 64 / 128 / 256
        let expected = [(32, 0.5e6), (64, 2e6), (128, 8e6), (256, 32e6)];
        for (d, target) in expected {
            let cfg = ModelConfig::for_dim(d);
            let count = count_parameters(&cfg) as f64;
            let rel = (count - target).abs() / target;
            assert!(rel < 0.05, "d={d}: {count} vs {target} ({rel:.3} off)");
        }
    }

    #[test]
    fn count_scales_quadratically_in_width() {
        let c64 = count_parameters(&ModelConfig::for_dim(64)) as f64;
        let c128 = count_parameters(&ModelConfig::for_dim(128)) as f64;
        let ratio = c128 / c64;
        assert!((ratio - 4.0).abs() < 0.15, "ratio {ratio}");
    }

    #[test]
    fn init_matches_specs_and_count() {
        let cfg = ModelConfig {
            model_dim: 16,
            n_layers: 2,
            num_head: 2,
            ..ModelConfig::default()
        };
        let mut rng = StreamRng::from_seed(1);
        let w: Weights<f32> = Weights::init(&cfg, &mut rng);
        assert_eq!(w.num_params(), count_parameters(&cfg));
        w.validate_against(&cfg).unwrap();
        let gain = w.get("layers.0.row_attn.norm.gain").unwrap();
        assert!(gain.data.iter().all(|&v| v == 1.0));
        let bias = w.get("generator.bias").unwrap();
        assert!(bias.data.iter().all(|&v| v == 0.0));
        let conv_bias = w.get("layers.1.conv1.bias").unwrap();
        assert!(conv_bias.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig {
            model_dim: 8,
            n_layers: 1,
            num_head: 1,
            ..ModelConfig::default()
        };
        let a: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(3));
        let b: Weights<f32> = Weights::init(&cfg, &mut StreamRng::from_seed(3));
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::for_dim(64);
        cfg.validate().unwrap();
        cfg.num_head = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::for_dim(64);
        cfg.cycling = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn decay_exemption_covers_norms_and_biases() {
        assert!(is_decay_exempt("layers.0.conv_norm.gain"));
        assert!(is_decay_exempt("layers.0.row_attn.q.bias"));
        assert!(is_decay_exempt("layers.0.conv1.bias"));
        assert!(is_decay_exempt("layers.3.col_attn.rel_bias"));
        assert!(!is_decay_exempt("layers.0.row_attn.q.weight"));
        assert!(!is_decay_exempt("embed_row.weight"));
        assert!(!is_decay_exempt("layers.0.conv1.weight"));
    }
}
