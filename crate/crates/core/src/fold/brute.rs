//! Exhaustive maximum-pair reference for small sequences.

use super::{can_pair, FoldError, RnaSequence};

const MAX_BRUTE_LEN: usize = 18;

/// Maximum number of canonical pairs over all valid nested structures,
/// found by plain enumeration (no memoization). Refuses sequences longer
/// than 18 bases; the structure count explodes combinatorially.
///
/// Deliberately organized differently from the folder it cross-checks: it
/// branches on the leftmost position instead of the right end.
pub fn brute_force_max_pairs(seq: &RnaSequence, min_loop: usize) -> Result<usize, FoldError> {
    let bases = seq.bases().as_bytes();
    if bases.len() > MAX_BRUTE_LEN {
        return Err(FoldError::SequenceTooLong {
            len: bases.len(),
            limit: MAX_BRUTE_LEN,
        });
    }
    Ok(enumerate(bases, min_loop, 0, bases.len()))
}

/// Best pair count over bases[lo..hi) with `lo` either unpaired or paired
/// with every admissible partner in turn.
fn enumerate(bases: &[u8], min_loop: usize, lo: usize, hi: usize) -> usize {
    if lo >= hi {
        return 0;
    }
    // lo unpaired
    let mut best = enumerate(bases, min_loop, lo + 1, hi);
    // lo paired with k; the pair splits the interval into inside and after
    let first_k = lo + min_loop + 1;
    for k in first_k..hi {
        if can_pair(bases[lo], bases[k]) {
            let inside = enumerate(bases, min_loop, lo + 1, k);
            let after = enumerate(bases, min_loop, k + 1, hi);
            best = best.max(1 + inside + after);
        }
    }
    best
}
