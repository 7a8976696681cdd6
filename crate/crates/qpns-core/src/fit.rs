//! Fitting and hypothesis-check utilities shared by the estimators: ordinary
//! least squares with R², exponential-rate fits on log scales, the
//! Kolmogorov-Smirnov distance against a normal reference, a bounded
//! comparison statistic for degenerate (zero-variance) cases, and Wilson
//! score intervals for Bernoulli probabilities.

use serde::Serialize;

use crate::reduce::pairwise_sum;
use crate::{CoreError, Result};

/// Ordinary least squares `y ~ intercept + slope x`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Standard error of the slope under homoskedastic residuals.
    pub slope_se: f64,
    /// Standard error of the intercept under the same residual model.
    pub intercept_se: f64,
    pub points: usize,
}

pub fn ols(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(CoreError::invalid("mismatched regression columns"));
    }
    let n = xs.len();
    if n < 3 {
        return Err(CoreError::DegenerateFit {
            detail: format!("{n} points are too few for a slope with a residual estimate"),
        });
    }
    let nf = n as f64;
    let sx = pairwise_sum(xs);
    let sy = pairwise_sum(ys);
    let xc: Vec<f64> = xs.iter().map(|x| x - sx / nf).collect();
    let yc: Vec<f64> = ys.iter().map(|y| y - sy / nf).collect();
    let sxx = pairwise_sum(&xc.iter().map(|x| x * x).collect::<Vec<_>>());
    let sxy = pairwise_sum(&xc.iter().zip(&yc).map(|(x, y)| x * y).collect::<Vec<_>>());
    let syy = pairwise_sum(&yc.iter().map(|y| y * y).collect::<Vec<_>>());
    if sxx <= 0.0 {
        return Err(CoreError::DegenerateFit {
            detail: "regressor has zero spread".into(),
        });
    }
    let slope = sxy / sxx;
    let intercept = sy / nf - slope * sx / nf;
    let ss_res = (syy - slope * sxy).max(0.0);
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    let slope_se = (ss_res / (nf - 2.0) / sxx).sqrt();
    let xbar = sx / nf;
    let intercept_se = slope_se * (sxx / nf + xbar * xbar).sqrt();
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
        slope_se,
        intercept_se,
        points: n,
    })
}

/// Exponential/power-law rate extracted from a log-scale fit, with the
/// censoring bookkeeping the estimators share.
#[derive(Debug, Clone, Serialize)]
pub struct RateFit {
    /// Slope on the log scale: decay exponent for log-linear data, power for
    /// log-log data.
    pub exponent: f64,
    pub exponent_se: f64,
    /// `exp(intercept)`.
    pub prefactor: f64,
    pub r_squared: f64,
    /// Points dropped before fitting (below a noise floor, nonpositive, or
    /// nonfinite).
    pub censored: usize,
    pub used: usize,
}

/// Fit `log y ~ intercept + exponent * x`, censoring points with `y` at or
/// below `floor`.
pub fn rate_fit(xs: &[f64], ys: &[f64], floor: f64) -> Result<RateFit> {
    if xs.len() != ys.len() {
        return Err(CoreError::invalid("mismatched rate-fit columns"));
    }
    let mut fx = Vec::new();
    let mut fy = Vec::new();
    let mut censored = 0usize;
    for (&x, &y) in xs.iter().zip(ys) {
        if y.is_finite() && y > floor && y > 0.0 && x.is_finite() {
            fx.push(x);
            fy.push(y.ln());
        } else {
            censored += 1;
        }
    }
    let fit = ols(&fx, &fy)?;
    Ok(RateFit {
        exponent: fit.slope,
        exponent_se: fit.slope_se,
        prefactor: fit.intercept.exp(),
        r_squared: fit.r_squared,
        censored,
        used: fit.points,
    })
}

/// Fit `log y ~ intercept + exponent * log x` (power law), with censoring.
pub fn power_fit(xs: &[f64], ys: &[f64], floor: f64) -> Result<RateFit> {
    let log_x: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    rate_fit(&log_x, ys, floor)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Kolmogorov-Smirnov sup distance between the sample empirical CDF and a
/// centered normal with the given variance. A zero-variance reference
/// degenerates to the point mass at 0.
pub fn ks_against_normal(samples: &[f64], sigma_sq: f64) -> f64 {
    assert!(!samples.is_empty());
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("nonfinite sample"));
    let n = sorted.len() as f64;
    let sigma = sigma_sq.max(0.0).sqrt();
    if sigma == 0.0 {
        // Point mass at 0: the sup distance is the larger one-sided mass
        // off the atom (the reference jumps with the empirical CDF at 0, so
        // the usual continuous-CDF scan would overcount the jump).
        let below = sorted.iter().filter(|&&x| x < 0.0).count() as f64 / n;
        let above = sorted.iter().filter(|&&x| x > 0.0).count() as f64 / n;
        return below.max(above);
    }
    let mut sup: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = normal_cdf(x / sigma);
        sup = sup.max((f - i as f64 / n).abs());
        sup = sup.max(((i + 1) as f64 / n - f).abs());
    }
    sup
}

/// `E[|Z| ∧ 1]` for `Z ~ N(0, sigma_sq)`; continuous at 0.
pub fn expected_abs_min1_normal(sigma_sq: f64) -> f64 {
    let sigma = sigma_sq.max(0.0).sqrt();
    if sigma == 0.0 {
        return 0.0;
    }
    let body = sigma * (2.0 / std::f64::consts::PI).sqrt() * (1.0 - (-0.5 / (sigma * sigma)).exp());
    let tail = 2.0 * (1.0 - normal_cdf(1.0 / sigma));
    body + tail
}

/// Bounded comparison statistic for possibly degenerate limits: the gap
/// between the sample mean of `|z| ∧ 1` and its value under `N(0,
/// sigma_sq)`. Stays meaningful when both laws collapse to a point mass.
pub fn weighted_degenerate_gap(samples: &[f64], sigma_sq: f64) -> f64 {
    let clipped: Vec<f64> = samples.iter().map(|z| z.abs().min(1.0)).collect();
    let sample_mean = pairwise_sum(&clipped) / clipped.len() as f64;
    (sample_mean - expected_abs_min1_normal(sigma_sq)).abs()
}

/// Wilson score interval for a binomial proportion at `z` standard normal
/// quantiles of confidence.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    assert!(trials > 0);
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let margin = (z / denom) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - margin).max(0.0), (center + margin).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, tags};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn ols_recovers_exact_line() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 2.0 * x).collect();
        let fit = ols(&xs, &ys).unwrap();
        assert!((fit.slope + 2.0).abs() < 1e-12);
        assert!((fit.intercept - 3.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        assert!(fit.slope_se < 1e-10);
    }

    #[test]
    fn ols_rejects_degenerate_inputs() {
        assert!(ols(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(matches!(
            ols(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(CoreError::DegenerateFit { .. })
        ));
    }

    #[test]
    fn rate_fit_recovers_decay_and_censors_floor() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 * 0.5).collect();
        let mut ys: Vec<f64> = xs.iter().map(|x| 5.0 * (-0.7 * x).exp()).collect();
        // Push the last points to or below an artificial floor; censoring is
        // strict, so the point sitting exactly at the floor goes too.
        let floor = ys[15];
        ys[16] = floor * 0.5;
        ys[17] = 0.0;
        ys[18] = f64::NAN;
        ys[19] = -1.0;
        let fit = rate_fit(&xs, &ys, floor).unwrap();
        assert_eq!(fit.censored, 5);
        assert_eq!(fit.used, 15);
        assert!((fit.exponent + 0.7).abs() < 1e-9);
        assert!((fit.prefactor - 5.0).abs() < 1e-9);
        assert!(fit.r_squared > 0.999_999);
    }

    #[test]
    fn power_fit_recovers_exponent() {
        let xs: Vec<f64> = (1..30).map(|i| i as f64 * 3.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x.powf(-0.5)).collect();
        let fit = power_fit(&xs, &ys, 0.0).unwrap();
        assert!((fit.exponent + 0.5).abs() < 1e-10);
        assert!((fit.prefactor - 2.0).abs() < 1e-9);
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        // Phi(1.96) from standard tables.
        assert!((normal_cdf(1.96) - 0.975_002_1).abs() < 1e-6);
        assert!((normal_cdf(-1.0) + normal_cdf(1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ks_small_for_matching_normal_sample() {
        let mut rng = stream_rng(21, tags::SCENARIO, 0, 0);
        let sigma = 2.5f64;
        let samples: Vec<f64> = (0..4000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * sigma
            })
            .collect();
        let d = ks_against_normal(&samples, sigma * sigma);
        // Kolmogorov 99% quantile at n = 4000 is about 1.63 / sqrt(n).
        assert!(d < 1.63 / (4000f64).sqrt(), "d = {d}");
        // And clearly large against a badly scaled reference.
        assert!(ks_against_normal(&samples, sigma * sigma * 9.0) > 0.2);
    }

    #[test]
    fn ks_degenerate_reference() {
        let zeros = vec![0.0; 100];
        assert_eq!(ks_against_normal(&zeros, 0.0), 0.0);
        assert!(ks_against_normal(&[1.0; 50], 0.0) >= 1.0 - 1e-12);
    }

    #[test]
    fn clipped_mean_statistic_degenerate_and_matching() {
        assert_eq!(weighted_degenerate_gap(&[0.0; 10], 0.0), 0.0);
        let mut rng = stream_rng(22, tags::SCENARIO, 0, 0);
        let samples: Vec<f64> = (0..20_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * 0.7
            })
            .collect();
        assert!(weighted_degenerate_gap(&samples, 0.49) < 0.02);
        // Numeric sanity of the closed form against direct quadrature.
        let sigma: f64 = 0.7;
        let steps = 200_000;
        let mut quad = 0.0;
        for i in 0..steps {
            let z = -8.0 + 16.0 * (i as f64 + 0.5) / steps as f64;
            let dens = (-(z * z) / (2.0 * sigma * sigma)).exp()
                / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            quad += z.abs().min(1.0) * dens * (16.0 / steps as f64);
        }
        assert!((expected_abs_min1_normal(sigma * sigma) - quad).abs() < 1e-6);
    }

    #[test]
    fn wilson_interval_brackets_truth() {
        let (lo, hi) = wilson_interval(50, 100, 1.96);
        assert!(lo < 0.5 && 0.5 < hi);
        assert!(lo > 0.39 && hi < 0.61);
        // Extreme counts stay inside [0, 1] and exclude the far end.
        let (lo0, hi0) = wilson_interval(0, 20, 1.96);
        assert_eq!(lo0, 0.0);
        assert!(hi0 < 0.25);
        let (lo1, hi1) = wilson_interval(20, 20, 1.96);
        assert!(lo1 > 0.75);
        assert_eq!(hi1, 1.0);
    }
}
