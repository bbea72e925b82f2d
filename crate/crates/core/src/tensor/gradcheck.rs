//! Finite-difference reference for gradient tests.
//!
//! Test support: evaluates a forward function only, so it stays independent
//! of the backward implementations it is used to check. Run this at f64 with
//! step ~1e-5; the truncation error of central differences is then far below
//! the 1e-4 tolerances asserted by the test suites.

/// Central-difference gradients of `f` with respect to every entry of every
/// parameter buffer.
pub fn finite_difference<F>(mut f: F, params: &[Vec<f64>], step: f64) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    let mut work: Vec<Vec<f64>> = params.to_vec();
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let orig = work[p][i];
            work[p][i] = orig + step;
            let plus = f(&work);
            work[p][i] = orig - step;
            let minus = f(&work);
            work[p][i] = orig;
            g[i] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Worst relative disagreement between analytic and numeric gradients.
/// Denominator floored so that near-zero gradients compare absolutely.
pub fn max_rel_err(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "parameter count mismatch");
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.len(), n.len(), "gradient length mismatch");
        for (&av, &nv) in a.iter().zip(n) {
            let denom = av.abs().max(nv.abs()).max(1e-6);
            let rel = (av - nv).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
