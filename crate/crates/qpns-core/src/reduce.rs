//! Deterministic accumulation.
//!
//! Parallel ensembles collect per-member results into an index-ordered
//! vector first; every floating-point reduction then runs sequentially in
//! pairwise order. The summation tree depends only on the slice length, so
//! outputs are bit-identical for any thread count, and the pairwise tree
//! keeps roundoff growth logarithmic instead of linear.

use rayon::prelude::*;

/// Pairwise (cascade) summation. Empty input sums to zero.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

pub fn mean(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    pairwise_sum(values) / values.len() as f64
}

/// Two-pass unbiased sample variance.
pub fn sample_variance(values: &[f64]) -> f64 {
    assert!(values.len() >= 2);
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    pairwise_sum(&sq) / (values.len() - 1) as f64
}

/// Mean together with its standard error.
pub fn mean_with_se(values: &[f64]) -> (f64, f64) {
    let m = mean(values);
    if values.len() < 2 {
        return (m, f64::INFINITY);
    }
    let se = (sample_variance(values) / values.len() as f64).sqrt();
    (m, se)
}

/// Sample variance together with the standard error of the variance
/// estimate itself, from the fourth central moment.
pub fn variance_with_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n >= 4);
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    let fourth: Vec<f64> = sq.iter().map(|s| s * s).collect();
    let m4 = pairwise_sum(&fourth) / n as f64;
    let var_of_var = (m4 - var * var * (n as f64 - 3.0) / (n as f64 - 1.0)) / n as f64;
    (var, var_of_var.max(0.0).sqrt())
}

/// Parallel map over `0..n` into an index-ordered vector. The per-index
/// closure must derive any randomness from the index itself.
pub fn par_map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}
