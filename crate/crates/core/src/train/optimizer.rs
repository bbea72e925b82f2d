//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use super::TrainConfig;
use crate::model::{is_decay_exempt, NamedTensor, Weights};

/// Optimizer state: first and second moments per parameter, in the weights'
/// tensor order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(weights: &Weights<f32>) -> Self {
        let m = weights.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        let v = weights.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self { m, v, t: 0 }
    }

    /// Restore moments from checkpointed tensors ("opt.m.<name>" / "opt.v.<name>").
    pub fn from_state(weights: &Weights<f32>, state: &[NamedTensor<f32>], t: u64) -> Option<Self> {
        let mut opt = Self::new(weights);
        opt.t = t;
        for (idx, wt) in weights.tensors().iter().enumerate() {
            let m = state.iter().find(|s| s.name == format!("opt.m.{}", wt.name))?;
            let v = state.iter().find(|s| s.name == format!("opt.v.{}", wt.name))?;
            if m.data.len() != wt.data.len() || v.data.len() != wt.data.len() {
                return None;
            }
            opt.m[idx] = m.data.clone();
            opt.v[idx] = v.data.clone();
        }
        Some(opt)
    }

    /// Export moments for checkpointing.
    pub fn to_state(&self, weights: &Weights<f32>) -> Vec<NamedTensor<f32>> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (idx, wt) in weights.tensors().iter().enumerate() {
            out.push(NamedTensor {
                name: format!("opt.m.{}", wt.name),
                shape: wt.shape.clone(),
                data: self.m[idx].clone(),
            });
            out.push(NamedTensor {
                name: format!("opt.v.{}", wt.name),
                shape: wt.shape.clone(),
                data: self.v[idx].clone(),
            });
        }
        out
    }

    /// One update. `grads` must be in the weights' tensor order. Weight decay
    /// is decoupled and skipped for norm gains and biases.
    pub fn step(&mut self, weights: &mut Weights<f32>, grads: &[Vec<f32>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.betas.0 as f32, cfg.betas.1 as f32);
        let eps = cfg.adam_eps as f32;
        let lr = lr as f32;
        let bias1 = 1.0 - (cfg.betas.0).powi(self.t as i32) as f32;
        let bias2 = 1.0 - (cfg.betas.1).powi(self.t as i32) as f32;
        for (idx, tensor) in weights.tensors_mut().iter_mut().enumerate() {
            let decay = if is_decay_exempt(&tensor.name) {
                0.0
            } else {
                cfg.weight_decay as f32
            };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for (i, p) in tensor.data.iter_mut().enumerate() {
                let g = grads[idx][i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * *p);
            }
        }
    }
}

/// Scales gradients in place so the global L2 norm does not exceed
/// `clip_val`; gradients already below pass through untouched. Returns the
/// pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f32>], clip_val: f64) -> f64 {
    let mut sq_sum = 0.0f64;
    for g in grads.iter() {
        for &x in g {
            sq_sum += (x as f64) * (x as f64);
        }
    }
    let norm = sq_sum.sqrt();
    if norm > clip_val && norm > 0.0 {
        let scale = (clip_val / norm) as f32;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
