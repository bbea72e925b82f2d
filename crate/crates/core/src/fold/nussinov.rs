//! Maximum-pairing dynamic program with deterministic traceback.

use super::{can_pair, RnaSequence, SecondaryStructure};

/// Folds a sequence into the nested structure maximizing the number of
/// canonical pairs {AU, UA, GC, CG, GU, UG}, subject to a minimum hairpin
/// loop of `min_loop` unpaired bases. N never pairs.
///
/// Ties are broken deterministically: prefer leaving the right end unpaired,
/// otherwise pair it with the smallest admissible partner. Identical input
/// always yields an identical traceback.
pub fn fold_mfe(seq: &RnaSequence, min_loop: usize) -> SecondaryStructure {
    let bases = seq.bases().as_bytes();
    let n = bases.len();
    if n <= min_loop {
        return SecondaryStructure::empty(n);
    }

    // dp[i][j] = max pairs over bases[i..=j], stored flat
    let mut dp = vec![0u16; n * n];
    let at = |i: usize, j: usize| i * n + j;
    for span in (min_loop + 1)..n {
        for i in 0..n - span {
            let j = i + span;
            // option 1: j unpaired
            let mut best = dp[at(i, j - 1)];
            // option 2: j pairs with some k in [i, j - min_loop - 1]
            for k in i..=(j - min_loop - 1) {
                if !can_pair(bases[k], bases[j]) {
                    continue;
                }
                let left = if k > i { dp[at(i, k - 1)] } else { 0 };
                let inner = if k + 1 <= j - 1 { dp[at(k + 1, j - 1)] } else { 0 };
                let cand = left + 1 + inner;
                if cand > best {
                    best = cand;
                }
            }
            dp[at(i, j)] = best;
        }
    }

    // traceback, preferring "j unpaired" and then the smallest partner k
    let mut pairs = Vec::new();
    let mut stack = vec![(0usize, n - 1)];
    while let Some((i, j)) = stack.pop() {
        if j <= i || j - i <= min_loop {
            continue;
        }
        let score = dp[at(i, j)];
        if score == dp[at(i, j - 1)] {
            stack.push((i, j - 1));
            continue;
        }
        let mut matched = false;
        for k in i..=(j - min_loop - 1) {
            if !can_pair(bases[k], bases[j]) {
                continue;
            }
            let left = if k > i { dp[at(i, k - 1)] } else { 0 };
            let inner = if k + 1 <= j - 1 { dp[at(k + 1, j - 1)] } else { 0 };
            if left + 1 + inner == score {
                pairs.push((k, j));
                if k > i {
                    stack.push((i, k - 1));
                }
                if k + 1 <= j - 1 {
                    stack.push((k + 1, j - 1));
                }
                matched = true;
                break;
            }
        }
        debug_assert!(matched, "traceback failed to reproduce dp score");
    }

    SecondaryStructure::new(n, pairs).expect("traceback produced valid pairs")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fold::{brute_force_max_pairs, MIN_LOOP};
    use crate::rng::StreamRng;

    fn seq(s: &str) -> RnaSequence {
        RnaSequence::new("t", s).unwrap()
    }

    #[test]
    fn no_complementary_pairs_folds_empty() {
        let s = fold_mfe(&seq("AAAA"), MIN_LOOP);
        assert!(s.pairs().is_empty());
    }

    #[test]
    fn unique_feasible_pair() {
        let s = fold_mfe(&seq("GAAAC"), MIN_LOOP);
        assert_eq!(s.pairs().iter().copied().collect::<Vec<_>>(), vec![(0, 4)]);
    }

    #[test]
    fn triple_helix_stem() {
        // brute force confirms 3 is the maximum for this sequence
        let s = seq("GGGAAACCC");
        assert_eq!(brute_force_max_pairs(&s, MIN_LOOP).unwrap(), 3);
        let folded = fold_mfe(&s, MIN_LOOP);
        let got: Vec<_> = folded.pairs().iter().copied().collect();
        assert_eq!(got, vec![(0, 8), (1, 7), (2, 6)]);
    }

    #[test]
    fn n_bases_never_pair() {
        let s = fold_mfe(&seq("GNNNC"), MIN_LOOP);
        assert_eq!(s.num_pairs(), 1); // only the outer G-C
        let s2 = fold_mfe(&seq("NAAAN"), MIN_LOOP);
        assert!(s2.pairs().is_empty());
    }

    #[test]
    fn output_satisfies_structure_invariants() {
        let mut rng = StreamRng::from_seed(5);
        let alphabet = [b'A', b'C', b'G', b'U'];
        for _ in 0..200 {
            let len = rng.uniform_range(1, 40) as usize;
            let bases: String = (0..len)
                .map(|_| alphabet[rng.uniform_range(0, 3) as usize] as char)
                .collect();
            let s = seq(&bases);
            let folded = fold_mfe(&s, MIN_LOOP);
            assert!(folded.is_matching(), "matching violated for {bases}");
            assert!(folded.is_nested(), "nestedness violated for {bases}");
            if let Some(min) = folded.min_loop_size() {
                assert!(min >= MIN_LOOP, "min loop violated for {bases}");
            }
        }
    }

    #[test]
    fn traceback_is_deterministic() {
        let s = seq("GGGCCAUAGCUAGCUAGCAUCGGAUCCG");
        let a = fold_mfe(&s, MIN_LOOP);
        let b = fold_mfe(&s, MIN_LOOP);
        assert_eq!(a, b);
    }

    #[test]
    fn matches_brute_force_pair_count_small() {
        let mut rng = StreamRng::from_seed(6);
        let alphabet = [b'A', b'C', b'G', b'U'];
        for _ in 0..200 {
            let len = rng.uniform_range(1, 14) as usize;
            let bases: String = (0..len)
                .map(|_| alphabet[rng.uniform_range(0, 3) as usize] as char)
                .collect();
            let s = seq(&bases);
            let dp = fold_mfe(&s, MIN_LOOP).num_pairs();
            let brute = brute_force_max_pairs(&s, MIN_LOOP).unwrap();
            assert_eq!(dp, brute, "count mismatch for {bases}");
        }
    }
}
