//! Training loop, optimizer and learning-rate schedule.

mod optimizer;
mod schedule;
mod trainer;

pub use optimizer::{clip_global_norm, AdamW};
pub use schedule::lr_at;
pub use trainer::{train, CheckpointKind, MemorySink, StepLog, TrainResult, TrainSink, TrainState};

use serde::{Deserialize, Serialize};
use std::fmt;

/// Optimization hyperparameters. Defaults mirror the published setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub num_warmup_steps: usize,
    pub decay_factor: f64,
    pub schedule: String,
    pub gradient_clip_val: f64,
    pub seed: u64,
    /// Recycle-count range sampled per training step (inclusive).
    pub min_cycles: usize,
    pub max_cycles: usize,
    pub eval_cycles: usize,
    /// Validation cadence in steps; best checkpoint selected by validation F1.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 50_000,
            learning_rate: 1e-3,
            weight_decay: 0.1,
            betas: (0.9, 0.98),
            adam_eps: 1e-9,
            num_warmup_steps: 2_000,
            decay_factor: 0.01,
            schedule: "cosine".into(),
            gradient_clip_val: 1.0,
            seed: 1,
            min_cycles: 2,
            max_cycles: 6,
            eval_cycles: 6,
            val_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.num_warmup_steps >= self.max_steps {
            return Err(TrainError::Config {
                message: format!(
                    "num_warmup_steps {} must be below max_steps {}",
                    self.num_warmup_steps, self.max_steps
                ),
            });
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(TrainError::Config {
                message: format!("decay_factor {} outside (0, 1]", self.decay_factor),
            });
        }
        if self.schedule != "cosine" {
            return Err(TrainError::Config {
                message: format!("unknown schedule '{}'", self.schedule),
            });
        }
        if self.min_cycles < 1 || self.min_cycles > self.max_cycles {
            return Err(TrainError::Config {
                message: format!(
                    "cycle range [{}, {}] invalid",
                    self.min_cycles, self.max_cycles
                ),
            });
        }
        if self.eval_cycles < 1 {
            return Err(TrainError::Config {
                message: "eval_cycles must be at least 1".into(),
            });
        }
        if self.val_every == 0 {
            return Err(TrainError::Config {
                message: "val_every must be positive".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum TrainError {
    Config { message: String },
    StepOutOfRange { step: usize, max_steps: usize },
    EmptyDataset,
    NonFiniteLoss { step: usize, loss: f64 },
    Model(crate::model::ModelError),
    Sink(std::io::Error),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Config { message } => write!(f, "train config: {message}"),
            Self::StepOutOfRange { step, max_steps } => {
                write!(f, "step {step} outside [0, {max_steps}]")
            }
            Self::EmptyDataset => write!(f, "training dataset is empty"),
            Self::NonFiniteLoss { step, loss } => {
                write!(f, "non-finite loss {loss} at step {step}; aborting")
            }
            Self::Model(e) => write!(f, "{e}"),
            Self::Sink(e) => write!(f, "sink I/O: {e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<crate::model::ModelError> for TrainError {
    fn from(e: crate::model::ModelError) -> Self {
        Self::Model(e)
    }
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        Self::Sink(e)
    }
}
