//! Prediction quality metrics and the evaluation harness.

use crate::data::{make_batches, Sample};
use crate::fold::SecondaryStructure;
use crate::model::{decode_structure, forward_recycled, GridInput, ModelConfig, ModelError, Weights};
use crate::rng::StreamRng;
use serde::Serialize;

/// F1 over predicted vs target pair sets (pairs i < j). Two empty sets score
/// 1 by convention.
pub fn pair_f1(pred: &SecondaryStructure, target: &SecondaryStructure) -> f64 {
    let tp = pred.pairs().intersection(target.pairs()).count() as f64;
    let fp = pred.pairs().len() as f64 - tp;
    let fn_ = target.pairs().len() as f64 - tp;
    if pred.pairs().is_empty() && target.pairs().is_empty() {
        return 1.0;
    }
    let denom = 2.0 * tp + fp + fn_;
    if denom == 0.0 {
        return 0.0;
    }
    2.0 * tp / denom
}

/// Matthews correlation over the binary classification of upper-triangle
/// cells (i < j). A zero denominator scores 0 by convention.
pub fn cell_mcc(pred: &SecondaryStructure, target: &SecondaryStructure) -> f64 {
    debug_assert_eq!(pred.length(), target.length());
    let l = pred.length();
    let total = (l * l).saturating_sub(l) / 2;
    let tp = pred.pairs().intersection(target.pairs()).count() as f64;
    let fp = pred.pairs().len() as f64 - tp;
    let fn_ = target.pairs().len() as f64 - tp;
    let tn = total as f64 - tp - fp - fn_;
    let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom
}

/// A structure counts as solved when the predicted pair set equals the
/// target exactly, which is the same as F1 == 1.
pub fn solved(pred: &SecondaryStructure, target: &SecondaryStructure) -> bool {
    pred.pairs() == target.pairs()
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleMetrics {
    pub id: String,
    pub len: usize,
    pub f1: f64,
    pub mcc: f64,
    pub solved: bool,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct MetricsReport {
    pub per_sample: Vec<SampleMetrics>,
    pub mean_f1: f64,
    pub mean_mcc: f64,
    pub solved_rate: f64,
    pub n_samples: usize,
    pub n_skipped: usize,
}

impl MetricsReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>, n_skipped: usize) -> Self {
        let n = per_sample.len();
        let (mut f1, mut mcc, mut solved_count) = (0.0, 0.0, 0usize);
        for s in &per_sample {
            f1 += s.f1;
            mcc += s.mcc;
            solved_count += s.solved as usize;
        }
        let denom = n.max(1) as f64;
        Self {
            per_sample,
            mean_f1: f1 / denom,
            mean_mcc: mcc / denom,
            solved_rate: solved_count as f64 / denom,
            n_samples: n,
            n_skipped,
        }
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        format!(
            "samples {:>6}   skipped {:>4}\nF1     {:>8.4}\nMCC    {:>8.4}\nSolved {:>7.1}%",
            self.n_samples,
            self.n_skipped,
            self.mean_f1,
            self.mean_mcc,
            self.solved_rate * 100.0
        )
    }
}

/// Runs the model over a labelled dataset and scores every sample.
/// Over-length samples are skipped and counted. Pure: repeated calls with
/// the same inputs produce identical reports.
pub fn evaluate(
    weights: &Weights<f32>,
    cfg: &ModelConfig,
    samples: &[Sample],
    eval_cycles: usize,
    batch_token_size: usize,
) -> Result<MetricsReport, ModelError> {
    let (eligible, skipped): (Vec<&Sample>, Vec<&Sample>) =
        samples.iter().partition(|s| s.seq.len() <= cfg.max_len);
    let owned: Vec<Sample> = eligible.into_iter().cloned().collect();
    // fixed seed: evaluation batching must not depend on caller state
    let mut rng = StreamRng::from_seed(0);
    let (batches, batch_skipped) = make_batches(
        &owned,
        batch_token_size.max(cfg.max_len),
        100,
        &mut rng,
    );
    let mut per_sample: Vec<Option<SampleMetrics>> = vec![None; owned.len()];
    for batch in &batches {
        let input = GridInput {
            batch: batch.batch,
            l: batch.l_pad,
            tokens: &batch.tokens,
            pad: &batch.pad,
        };
        let mut fwd_rng = StreamRng::from_seed(0);
        let fwd = forward_recycled(weights, cfg, &input, eval_cycles, false, &mut fwd_rng)?;
        let logits = fwd.graph.data(fwd.logits);
        let lp = batch.l_pad;
        for (bi, &sample_idx) in batch.samples.iter().enumerate() {
            let sample = &owned[sample_idx];
            let l = sample.seq.len();
            let mut cell_logits = Vec::with_capacity(l * l * 2);
            for i in 0..l {
                for j in 0..l {
                    let base = ((bi * lp + i) * lp + j) * 2;
                    cell_logits.push(logits[base]);
                    cell_logits.push(logits[base + 1]);
                }
            }
            let pred = decode_structure(&cell_logits, l);
            per_sample[sample_idx] = Some(SampleMetrics {
                id: sample.seq.id().to_string(),
                len: l,
                f1: pair_f1(&pred, &sample.structure),
                mcc: cell_mcc(&pred, &sample.structure),
                solved: solved(&pred, &sample.structure),
            });
        }
    }
    let per_sample: Vec<SampleMetrics> = per_sample.into_iter().flatten().collect();
    Ok(MetricsReport::from_samples(
        per_sample,
        skipped.len() + batch_skipped.len(),
    ))
}
