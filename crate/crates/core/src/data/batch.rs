//! Token-budget batching and loss masking.

use super::Sample;
use crate::fold::PairMatrix;
use crate::rng::StreamRng;
use crate::tensor::Scalar;

/// A padded training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Indices into the sample list this batch was built from.
    pub samples: Vec<usize>,
    pub batch: usize,
    pub l_pad: usize,
    /// [batch * l_pad] token ids, zero-padded.
    pub tokens: Vec<u32>,
    /// [batch * l_pad] true at padded positions.
    pub pad: Vec<bool>,
    /// [batch * l_pad * l_pad] stacked pair matrices (padding cells zero).
    pub targets: Vec<u8>,
}

impl Batch {
    pub fn padded_tokens(&self) -> usize {
        self.batch * self.l_pad
    }
}

/// Streaming shuffle: items enter a pool of `pool_size` in order; once the
/// pool is full each arrival evicts a uniformly random occupant. Produces a
/// permutation of 0..n with bounded memory.
pub fn shuffled_indices(n: usize, pool_size: usize, rng: &mut StreamRng) -> Vec<usize> {
    let pool_size = pool_size.max(1);
    let mut pool: Vec<usize> = Vec::with_capacity(pool_size);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if pool.len() < pool_size {
            pool.push(i);
        } else {
            let slot = rng.uniform_range(0, pool.len() as u64 - 1) as usize;
            out.push(std::mem::replace(&mut pool[slot], i));
        }
    }
    while !pool.is_empty() {
        let slot = rng.uniform_range(0, pool.len() as u64 - 1) as usize;
        out.push(pool.swap_remove(slot));
    }
    out
}

/// Greedy token-budget packing over a shuffled stream: sequences accumulate
/// until the padded footprint (max length x count) would exceed
/// `batch_token_size`. Sequences longer than the whole budget are skipped;
/// their indices are returned for the caller to warn about.
pub fn make_batches(
    samples: &[Sample],
    batch_token_size: usize,
    shuffle_pool_size: usize,
    rng: &mut StreamRng,
) -> (Vec<Batch>, Vec<usize>) {
    let order = shuffled_indices(samples.len(), shuffle_pool_size, rng);
    let mut batches = Vec::new();
    let mut skipped = Vec::new();
    let mut group: Vec<usize> = Vec::new();
    let mut group_max = 0usize;
    for idx in order {
        let len = samples[idx].seq.len();
        if len > batch_token_size {
            skipped.push(idx);
            continue;
        }
        let new_max = group_max.max(len);
        if !group.is_empty() && new_max * (group.len() + 1) > batch_token_size {
            batches.push(build_batch(samples, &group, group_max));
            group.clear();
            group_max = 0;
        }
        group_max = group_max.max(len);
        group.push(idx);
    }
    if !group.is_empty() {
        batches.push(build_batch(samples, &group, group_max));
    }
    (batches, skipped)
}

fn build_batch(samples: &[Sample], group: &[usize], l_pad: usize) -> Batch {
    let b = group.len();
    let mut tokens = vec![0u32; b * l_pad];
    let mut pad = vec![true; b * l_pad];
    let mut targets = vec![0u8; b * l_pad * l_pad];
    for (bi, &idx) in group.iter().enumerate() {
        let sample = &samples[idx];
        let ids = sample.seq.token_ids();
        let l = ids.len();
        tokens[bi * l_pad..bi * l_pad + l].copy_from_slice(&ids);
        for p in pad.iter_mut().skip(bi * l_pad).take(l) {
            *p = false;
        }
        for &(i, j) in sample.structure.pairs() {
            targets[(bi * l_pad + i) * l_pad + j] = 1;
            targets[(bi * l_pad + j) * l_pad + i] = 1;
        }
    }
    Batch {
        samples: group.to_vec(),
        batch: b,
        l_pad,
        tokens,
        pad,
        targets,
    }
}

/// Loss inclusion mask for a single target matrix: paired cells always
/// included, each unpaired cell kept independently with probability
/// 1 - ignore_prob. Resampled by the caller every step.
pub fn build_loss_mask<T: Scalar>(
    target: &PairMatrix,
    ignore_prob: f64,
    rng: &mut StreamRng,
) -> Vec<T> {
    let l = target.len();
    let mut mask = Vec::with_capacity(l * l);
    for i in 0..l {
        for j in 0..l {
            let keep = target.get(i, j) || rng.uniform_f64() >= ignore_prob;
            mask.push(if keep { T::one() } else { T::zero() });
        }
    }
    mask
}

/// Batch-level loss mask: padding cells excluded outright, paired cells
/// always included, unpaired real cells kept with probability 1 - ignore_prob.
pub fn batch_loss_mask<T: Scalar>(batch: &Batch, ignore_prob: f64, rng: &mut StreamRng) -> Vec<T> {
    let l = batch.l_pad;
    let mut mask = vec![T::zero(); batch.batch * l * l];
    for bi in 0..batch.batch {
        for i in 0..l {
            for j in 0..l {
                let cell = (bi * l + i) * l + j;
                if batch.pad[bi * l + i] || batch.pad[bi * l + j] {
                    continue;
                }
                let keep = batch.targets[cell] == 1 || rng.uniform_f64() >= ignore_prob;
                if keep {
                    mask[cell] = T::one();
                }
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fold::{RnaSequence, SecondaryStructure};

    fn sample_of_len(n: usize) -> Sample {
        let bases: String = "ACGU".chars().cycle().take(n).collect();
        let seq = RnaSequence::new(format!("s{n}"), &bases).unwrap();
        Sample {
            structure: SecondaryStructure::empty(n),
            seq,
            family_id: "f".into(),
            split: "train".into(),
        }
    }

    #[test]
    fn full_length_sequences_batch_alone() {
        let samples: Vec<Sample> = (0..4).map(|_| sample_of_len(500)).collect();
        let mut rng = StreamRng::from_seed(1);
        let (batches, skipped) = make_batches(&samples, 500, 100, &mut rng);
        assert!(skipped.is_empty());
        assert_eq!(batches.len(), 4);
        for b in &batches {
            assert_eq!(b.batch, 1);
        }
    }

    #[test]
    fn ten_of_fifty_fit_one_batch() {
        let samples: Vec<Sample> = (0..10).map(|_| sample_of_len(50)).collect();
        let mut rng = StreamRng::from_seed(2);
        let (batches, skipped) = make_batches(&samples, 500, 100, &mut rng);
        assert!(skipped.is_empty());
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].batch, 10);
        assert_eq!(batches[0].padded_tokens(), 500);
    }

    #[test]
    fn epoch_preserves_sample_multiset_and_budget() {
        let mut rng = StreamRng::from_seed(3);
        for trial in 0..10 {
            let n = 30 + trial * 7;
            let samples: Vec<Sample> = (0..n)
                .map(|i| sample_of_len(10 + (i * 13) % 60))
                .collect();
            let budget = 150;
            let (batches, skipped) = make_batches(&samples, budget, 16, &mut rng);
            assert!(skipped.is_empty());
            let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.samples.clone()).collect();
            seen.sort_unstable();
            let expected: Vec<usize> = (0..n).collect();
            assert_eq!(seen, expected, "multiset not conserved");
            for b in &batches {
                assert!(b.padded_tokens() <= budget, "budget exceeded");
                let max_len = b.samples.iter().map(|&i| samples[i].seq.len()).max().unwrap();
                assert_eq!(b.l_pad, max_len);
            }
        }
    }

    #[test]
    fn overlong_sequences_are_skipped() {
        let samples = vec![sample_of_len(50), sample_of_len(600), sample_of_len(40)];
        let mut rng = StreamRng::from_seed(4);
        let (batches, skipped) = make_batches(&samples, 500, 100, &mut rng);
        assert_eq!(skipped, vec![1]);
        let seen: usize = batches.iter().map(|b| b.batch).sum();
        assert_eq!(seen, 2);
    }

    #[test]
    fn shuffle_produces_permutation() {
        let mut rng = StreamRng::from_seed(5);
        let mut order = shuffled_indices(1000, 100, &mut rng);
        assert_ne!(order, (0..1000).collect::<Vec<_>>(), "pool shuffle did nothing");
        order.sort_unstable();
        assert_eq!(order, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn loss_mask_keeps_everything_at_zero_ignore() {
        let s = SecondaryStructure::new(6, [(0, 5)]).unwrap();
        let m = s.to_pair_matrix();
        let mut rng = StreamRng::from_seed(6);
        let mask: Vec<f32> = build_loss_mask(&m, 0.0, &mut rng);
        assert!(mask.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn loss_mask_always_keeps_paired_cells() {
        let s = SecondaryStructure::new(8, [(0, 7), (1, 6), (2, 5)]).unwrap();
        let m = s.to_pair_matrix();
        let mut rng = StreamRng::from_seed(7);
        for _ in 0..20 {
            let mask: Vec<f32> = build_loss_mask(&m, 0.9, &mut rng);
            for i in 0..8 {
                for j in 0..8 {
                    if m.get(i, j) {
                        assert_eq!(mask[i * 8 + j], 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn unpaired_inclusion_rate_near_half() {
        let m = PairMatrix::zeros(340); // 115600 unpaired cells
        let mut rng = StreamRng::from_seed(8);
        let mask: Vec<f32> = build_loss_mask(&m, 0.5, &mut rng);
        let kept = mask.iter().filter(|&&v| v == 1.0).count();
        let rate = kept as f64 / mask.len() as f64;
        assert!(mask.len() >= 100_000);
        assert!((0.49..=0.51).contains(&rate), "inclusion rate {rate}");
    }

    #[test]
    fn batch_mask_excludes_padding_entirely() {
        let samples = vec![sample_of_len(10), sample_of_len(16)];
        let mut rng = StreamRng::from_seed(9);
        let (batches, _) = make_batches(&samples, 64, 10, &mut rng);
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        let mask: Vec<f32> = batch_loss_mask(b, 0.0, &mut rng);
        for bi in 0..b.batch {
            for i in 0..b.l_pad {
                for j in 0..b.l_pad {
                    let cell = (bi * b.l_pad + i) * b.l_pad + j;
                    let padded = b.pad[bi * b.l_pad + i] || b.pad[bi * b.l_pad + j];
                    if padded {
                        assert_eq!(mask[cell], 0.0);
                    } else {
                        assert_eq!(mask[cell], 1.0);
                    }
                }
            }
        }
    }
}
