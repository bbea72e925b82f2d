//! Linear warmup followed by cosine decay.

use super::{TrainConfig, TrainError};

/// Learning rate at a step: linear from 0 to `learning_rate` over
/// `num_warmup_steps`, then cosine decay down to
/// `learning_rate * decay_factor` at `max_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if step > cfg.max_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            max_steps: cfg.max_steps,
        });
    }
    let peak = cfg.learning_rate;
    if step <= cfg.num_warmup_steps {
        if cfg.num_warmup_steps == 0 {
            return Ok(peak);
        }
        return Ok(peak * step as f64 / cfg.num_warmup_steps as f64);
    }
    let floor = peak * cfg.decay_factor;
    let progress = (step - cfg.num_warmup_steps) as f64
        / (cfg.max_steps - cfg.num_warmup_steps) as f64;
    Ok(floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
