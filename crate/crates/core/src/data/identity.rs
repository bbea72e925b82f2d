//! Sequence identity and train/eval similarity rejection.

use super::Sample;
use crate::fold::RnaSequence;
use rayon::prelude::*;

/// Global-alignment identity with unit match score and free gaps: the
/// longest common subsequence normalized by the longer length. Symmetric.
pub fn sequence_identity(a: &RnaSequence, b: &RnaSequence) -> f64 {
    let matches = lcs_length(a.bases().as_bytes(), b.bases().as_bytes());
    matches as f64 / a.len().max(b.len()) as f64
}

/// Longest common subsequence via the O(n*m) table with a rolling row.
fn lcs_length(a: &[u8], b: &[u8]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut prev = vec![0u32; short.len() + 1];
    let mut curr = vec![0u32; short.len() + 1];
    for &lb in long {
        for (j, &sb) in short.iter().enumerate() {
            curr[j + 1] = if lb == sb {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[short.len()] as usize
}

/// Drops every training sample whose identity to any evaluation sequence
/// reaches the cutoff. Evaluation sets are never modified. Returns the kept
/// samples in their original order and the number removed.
pub fn similarity_filter(
    train: Vec<Sample>,
    eval_seqs: &[&RnaSequence],
    cutoff: f64,
) -> (Vec<Sample>, usize) {
    let flags: Vec<bool> = train
        .par_iter()
        .map(|s| {
            eval_seqs
                .iter()
                .any(|e| sequence_identity(&s.seq, e) >= cutoff)
        })
        .collect();
    let before = train.len();
    let kept: Vec<Sample> = train
        .into_iter()
        .zip(flags)
        .filter_map(|(s, reject)| if reject { None } else { Some(s) })
        .collect();
    let removed = before - kept.len();
    (kept, removed)
}
