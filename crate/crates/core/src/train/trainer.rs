//! The training loop: batch stream, recycled forward, masked loss, clipped
//! AdamW updates, periodic validation and checkpointing.

use super::{clip_global_norm, lr_at, AdamW, TrainConfig, TrainError};
use crate::data::{batch_loss_mask, make_batches, Batch, DataConfig, Sample};
use crate::metrics::evaluate;
use crate::model::{forward_recycled, GridInput, ModelConfig, Weights};
use crate::rng::StreamRng;
use serde::Serialize;

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Best,
    Last,
    Diagnostic,
}

/// Receives log lines and checkpoints as training progresses.
pub trait TrainSink {
    fn on_step(&mut self, log: &StepLog) -> std::io::Result<()>;
    fn on_checkpoint(
        &mut self,
        kind: CheckpointKind,
        weights: &Weights<f32>,
        optimizer: &AdamW,
        step: usize,
        best_val_f1: Option<f64>,
    ) -> std::io::Result<()>;
}

/// Sink that keeps logs in memory and drops checkpoints.
#[derive(Default)]
pub struct MemorySink {
    pub logs: Vec<StepLog>,
}

impl TrainSink for MemorySink {
    fn on_step(&mut self, log: &StepLog) -> std::io::Result<()> {
        self.logs.push(log.clone());
        Ok(())
    }
    fn on_checkpoint(
        &mut self,
        _kind: CheckpointKind,
        _weights: &Weights<f32>,
        _optimizer: &AdamW,
        _step: usize,
        _best_val_f1: Option<f64>,
    ) -> std::io::Result<()> {
        Ok(())
    }
}

/// Mutable trainer state; resuming a run restores this from a checkpoint.
pub struct TrainState {
    pub weights: Weights<f32>,
    pub optimizer: AdamW,
    /// Number of completed optimization steps.
    pub start_step: usize,
    pub best_val_f1: Option<f64>,
}

impl TrainState {
    /// Fresh state: weights drawn from the run seed.
    pub fn fresh(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Self {
        let root = StreamRng::from_seed(train_cfg.seed);
        let weights = Weights::init(model_cfg, &mut root.split("init"));
        let optimizer = AdamW::new(&weights);
        Self {
            weights,
            optimizer,
            start_step: 0,
            best_val_f1: None,
        }
    }
}

pub struct TrainResult {
    pub weights: Weights<f32>,
    pub optimizer: AdamW,
    pub steps_done: usize,
    pub best_val_f1: Option<f64>,
}

/// Runs (or resumes) training to `max_steps`, or to `stop_after` completed
/// steps when given (a controlled interrupt; the schedule still follows
/// `max_steps`).
///
/// Every stochastic choice of step s derives from `split_index("step", s)` of
/// the run seed, and epoch shuffles from `split_index("epoch", e)`, so a
/// resumed run replays exactly the trajectory of an uninterrupted one.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data_cfg: &DataConfig,
    train_samples: &[Sample],
    valid_samples: &[Sample],
    state: TrainState,
    stop_after: Option<usize>,
    sink: &mut dyn TrainSink,
) -> Result<TrainResult, TrainError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train_samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let end_step = stop_after.unwrap_or(train_cfg.max_steps).min(train_cfg.max_steps);
    let root = StreamRng::from_seed(train_cfg.seed);
    let TrainState {
        mut weights,
        mut optimizer,
        start_step,
        mut best_val_f1,
    } = state;

    let mut epoch = 0u64;
    let mut batches: Vec<Batch> = Vec::new();
    let mut batch_idx = 0usize;
    let mut next_epoch = |epoch: &mut u64, batch_idx: &mut usize, batches: &mut Vec<Batch>| -> Result<(), TrainError> {
        loop {
            let mut erng = root.split_index("epoch", *epoch);
            let (eb, _skipped) = make_batches(
                train_samples,
                data_cfg.batch_token_size,
                data_cfg.shuffle_pool_size,
                &mut erng,
            );
            *epoch += 1;
            if !eb.is_empty() {
                *batches = eb;
                *batch_idx = 0;
                return Ok(());
            }
            if *epoch > 1 {
                // every sequence exceeded the budget
                return Err(TrainError::EmptyDataset);
            }
        }
    };
    next_epoch(&mut epoch, &mut batch_idx, &mut batches)?;

    // fast-forward the batch stream to the resume point
    for _ in 0..start_step {
        batch_idx += 1;
        if batch_idx >= batches.len() {
            next_epoch(&mut epoch, &mut batch_idx, &mut batches)?;
        }
    }

    for step in start_step..end_step {
        let batch = &batches[batch_idx];
        let mut step_rng = root.split_index("step", step as u64);
        let n_cycles =
            step_rng.uniform_range(train_cfg.min_cycles as u64, train_cfg.max_cycles as u64) as usize;
        let input = GridInput {
            batch: batch.batch,
            l: batch.l_pad,
            tokens: &batch.tokens,
            pad: &batch.pad,
        };
        let mut fwd = forward_recycled(&weights, model_cfg, &input, n_cycles, true, &mut step_rng)?;
        let mask: Vec<f32> = batch_loss_mask(batch, data_cfg.random_ignore_mat, &mut step_rng);
        let cells = batch.batch * batch.l_pad * batch.l_pad;
        let logits2 = fwd.graph.reshape(fwd.logits, &[cells, 2]).map_err(crate::model::ModelError::from)?;
        let loss_id = fwd
            .graph
            .masked_cross_entropy(logits2, &batch.targets, &mask)
            .map_err(crate::model::ModelError::from)?;
        let loss = fwd.graph.scalar_value(loss_id) as f64;
        if !loss.is_finite() {
            sink.on_checkpoint(CheckpointKind::Diagnostic, &weights, &optimizer, step, best_val_f1)?;
            return Err(TrainError::NonFiniteLoss { step, loss });
        }
        fwd.graph
            .backward(loss_id)
            .map_err(crate::model::ModelError::from)?;
        let mut grads: Vec<Vec<f32>> = weights
            .tensors()
            .iter()
            .map(|t| {
                let id = fwd.params.get(&t.name);
                fwd.graph
                    .grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.data.len()])
            })
            .collect();
        drop(fwd);

        let grad_norm = clip_global_norm(&mut grads, train_cfg.gradient_clip_val);
        let lr = lr_at(step + 1, train_cfg)?;
        optimizer.step(&mut weights, &grads, lr, train_cfg);

        let done = step + 1;
        let mut val_f1 = None;
        if done % train_cfg.val_every == 0 && !valid_samples.is_empty() {
            let report = evaluate(
                &weights,
                model_cfg,
                valid_samples,
                train_cfg.eval_cycles,
                data_cfg.batch_token_size,
            )?;
            val_f1 = Some(report.mean_f1);
            let improved = best_val_f1.map_or(true, |b| report.mean_f1 > b);
            if improved {
                best_val_f1 = Some(report.mean_f1);
                sink.on_checkpoint(CheckpointKind::Best, &weights, &optimizer, done, best_val_f1)?;
            }
            sink.on_checkpoint(CheckpointKind::Last, &weights, &optimizer, done, best_val_f1)?;
        }
        sink.on_step(&StepLog {
            step: done,
            loss,
            lr,
            grad_norm,
            val_f1,
        })?;

        batch_idx += 1;
        if batch_idx >= batches.len() {
            next_epoch(&mut epoch, &mut batch_idx, &mut batches)?;
        }
    }
    sink.on_checkpoint(
        CheckpointKind::Last,
        &weights,
        &optimizer,
        end_step,
        best_val_f1,
    )?;
    Ok(TrainResult {
        weights,
        optimizer,
        steps_done: end_step,
        best_val_f1,
    })
}
