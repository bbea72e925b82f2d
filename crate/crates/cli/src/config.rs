//! The run configuration document: one JSON file with model/train/data
//! sections. Missing keys fall back to the published defaults; unknown keys
//! are rejected so typos surface immediately.

use crate::CliError;
use rnaformer_core::data::DataConfig;
use rnaformer_core::model::ModelConfig;
use rnaformer_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Fully resolved snapshot for the manifest, defaults included.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_published_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.model_dim, 256);
        assert_eq!(cfg.train.num_warmup_steps, 2000);
        assert_eq!(cfg.train.betas, (0.9, 0.98));
        assert_eq!(cfg.data.batch_token_size, 500);
        assert_eq!(cfg.data.random_ignore_mat, 0.5);
    }

    #[test]
    fn missing_keys_default_and_unknown_keys_error() {
        let partial: RunConfig =
            serde_json::from_str(r#"{"model": {"model_dim": 64, "num_head": 1}}"#).unwrap();
        assert_eq!(partial.model.model_dim, 64);
        assert_eq!(partial.model.n_layers, 6);
        assert_eq!(partial.train.learning_rate, 1e-3);

        let bad = serde_json::from_str::<RunConfig>(r#"{"model": {"modle_dim": 64}}"#);
        let err = format!("{}", bad.unwrap_err());
        assert!(err.contains("modle_dim"), "error should name the key: {err}");
    }
}
