//! Quasi-periodic deterministic forcing, the torus rotation that drives it,
//! Diophantine-condition utilities for the frequency vector, and the
//! degenerate noise configuration.
//!
//! The force is a finite Fourier series in the torus angle: each term pairs a
//! wave vector `m` with two spectral amplitude fields, one multiplying
//! `cos(m . h)` and one multiplying `sin(m . h)`. Finite series keep the
//! sup-norm and Lipschitz bounds certifiable instead of merely estimated.

use std::f64::consts::TAU;

use crate::spectral::{ModeLattice, SpectralVorticity};
use crate::{CoreError, Result};
use std::sync::Arc;

/// Point on the n-torus; components reduced to `[0, 2 pi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusPoint {
    h: Vec<f64>,
}

impl TorusPoint {
    pub fn new(components: Vec<f64>) -> Self {
        let h = components.into_iter().map(reduce_angle).collect();
        TorusPoint { h }
    }

    pub fn origin(dim: usize) -> Self {
        TorusPoint { h: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.h
    }

    /// Geodesic distance on the torus (componentwise shortest arc, Euclidean
    /// over components).
    pub fn distance(&self, other: &TorusPoint) -> f64 {
        assert_eq!(self.dim(), other.dim());
        self.h
            .iter()
            .zip(&other.h)
            .map(|(a, b)| {
                let d = (a - b).rem_euclid(TAU);
                d.min(TAU - d).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }
}

fn reduce_angle(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    // rem_euclid can return the period itself when x is a tiny negative
    // number; fold that back to 0.
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Rotation frequency vector of the torus flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Frequency {
    alpha: Vec<f64>,
}

impl Frequency {
    pub fn new(alpha: Vec<f64>) -> Self {
        assert!(!alpha.is_empty(), "frequency vector must be nonempty");
        Frequency { alpha }
    }

    /// The golden-mean frequency `(sqrt(5) - 1) / 2` on the 1-torus, the
    /// canonical well-behaved default.
    pub fn golden_mean() -> Self {
        Frequency::new(vec![(5.0f64.sqrt() - 1.0) / 2.0])
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.alpha
    }

    /// Finite proxy for rational independence of `(alpha, 1)`: no integer
    /// vector `k` with `0 < max|k_i| <= q_check` puts `k . alpha` within
    /// `tol` of an integer. A proxy, not a proof; `q_check` defaults to 1000
    /// in the run configs.
    pub fn is_rationally_independent(&self, q_check: u32, tol: f64) -> bool {
        let mut independent = true;
        scan_half_lattice(self.dim(), q_check as i64, |k| {
            if dist_to_integers(dot(k, &self.alpha)) < tol {
                independent = false;
            }
        });
        independent
    }
}

fn dot(k: &[i64], alpha: &[f64]) -> f64 {
    k.iter()
        .zip(alpha)
        .map(|(&ki, &ai)| ki as f64 * ai)
        .sum()
}

fn dist_to_integers(x: f64) -> f64 {
    (x - x.round()).abs()
}

/// Visit every integer vector in `[-bound, bound]^dim` whose first nonzero
/// component is positive (one representative per `{k, -k}` pair), in
/// lexicographic order.
fn scan_half_lattice(dim: usize, bound: i64, mut visit: impl FnMut(&[i64])) {
    let mut k = vec![-bound; dim];
    loop {
        if let Some(first) = k.iter().find(|&&c| c != 0) {
            if *first > 0 {
                visit(&k);
            }
        }
        // Odometer increment.
        let mut i = dim;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if k[i] < bound {
                k[i] += 1;
                break;
            }
            k[i] = -bound;
        }
    }
}

/// The rotation flow `h + alpha t` on the torus.
pub fn rotate(h: &TorusPoint, alpha: &Frequency, t: f64) -> TorusPoint {
    assert_eq!(h.dim(), alpha.dim());
    TorusPoint::new(
        h.h.iter()
            .zip(&alpha.alpha)
            .map(|(&hi, &ai)| hi + ai * t)
            .collect(),
    )
}

/// One Fourier term of the force: amplitude fields for the `cos(m . h)` and
/// `sin(m . h)` lines of wave vector `m`.
#[derive(Debug, Clone)]
pub struct ForceTerm {
    pub m: Vec<i64>,
    pub cos_amplitude: SpectralVorticity,
    pub sin_amplitude: SpectralVorticity,
}

/// Quasi-periodic force: finite Fourier series over the torus angle, plus the
/// frequency that advances the angle and the Holder exponent the run claims
/// for it (any value in (0, 1] is valid for a finite series, which is
/// Lipschitz).
#[derive(Debug, Clone)]
pub struct QuasiPeriodicForce {
    pub frequency: Frequency,
    pub terms: Vec<ForceTerm>,
    pub gamma: f64,
}

impl QuasiPeriodicForce {
    pub fn new(frequency: Frequency, terms: Vec<ForceTerm>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(CoreError::invalid(format!(
                "Holder exponent must lie in (0, 1], got {gamma}"
            )));
        }
        for term in &terms {
            if term.m.len() != frequency.dim() {
                return Err(CoreError::invalid(format!(
                    "force term wave vector has dimension {}, frequency has {}",
                    term.m.len(),
                    frequency.dim()
                )));
            }
        }
        Ok(QuasiPeriodicForce {
            frequency,
            terms,
            gamma,
        })
    }

    /// Force with no deterministic part.
    pub fn zero(frequency: Frequency) -> Self {
        QuasiPeriodicForce {
            frequency,
            terms: Vec::new(),
            gamma: 1.0,
        }
    }

    /// Evaluate the series at a torus point.
    pub fn eval(&self, lattice: &Arc<ModeLattice>, h: &TorusPoint) -> SpectralVorticity {
        assert_eq!(h.dim(), self.frequency.dim());
        let mut out = SpectralVorticity::zeros(lattice);
        for term in &self.terms {
            let phase = term
                .m
                .iter()
                .zip(h.components())
                .map(|(&mi, &hi)| mi as f64 * hi)
                .sum::<f64>();
            out.add_scaled(&term.cos_amplitude, phase.cos());
            out.add_scaled(&term.sin_amplitude, phase.sin());
        }
        out
    }

    /// Certified upper bound for `sup_h` of the evaluated norm: the sum of
    /// all amplitude norms.
    pub fn sup_norm_bound(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| t.cos_amplitude.norm() + t.sin_amplitude.norm())
            .sum()
    }

    /// Certified Lipschitz constant in the torus angle:
    /// `sum |m| (|cos amp| + |sin amp|)`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let m_norm = t
                    .m
                    .iter()
                    .map(|&mi| (mi * mi) as f64)
                    .sum::<f64>()
                    .sqrt();
                m_norm * (t.cos_amplitude.norm() + t.sin_amplitude.norm())
            })
            .sum()
    }

    /// The force with its phases advanced by time `s`: evaluating the result
    /// at `h` equals evaluating the original at `h + alpha s`. Realized by
    /// rotating each term's (cos, sin) amplitude pair.
    pub fn time_shifted(&self, s: f64) -> Self {
        let mut shifted = self.clone();
        for term in &mut shifted.terms {
            let phi = dot(&term.m, self.frequency.components()) * s;
            let (sin_phi, cos_phi) = phi.sin_cos();
            let mut cos_amp = term.cos_amplitude.clone();
            cos_amp.scale(cos_phi);
            cos_amp.add_scaled(&term.sin_amplitude, sin_phi);
            let mut sin_amp = term.sin_amplitude.clone();
            sin_amp.scale(cos_phi);
            sin_amp.add_scaled(&term.cos_amplitude, -sin_phi);
            term.cos_amplitude = cos_amp;
            term.sin_amplitude = sin_amp;
        }
        shifted
    }
}

/// Additive noise acting through finitely many fixed directions, each driven
/// by its own scalar Wiener process.
#[derive(Debug, Clone)]
pub struct NoiseConfig {
    directions: Vec<SpectralVorticity>,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn new(directions: Vec<SpectralVorticity>, seed: u64) -> Result<Self> {
        let config = NoiseConfig { directions, seed };
        if !config.directions.is_empty() && config.energy_input() <= 0.0 {
            return Err(CoreError::invalid(
                "noise directions present but total energy input is zero",
            ));
        }
        Ok(config)
    }

    /// No stochastic forcing at all.
    pub fn silent() -> Self {
        NoiseConfig {
            directions: Vec::new(),
            seed: 0,
        }
    }

    /// The canonical degenerate set: the four real directions of modes
    /// (1,0) and (1,1), i.e. `amp cos x1`, `amp sin x1`, `amp cos(x1 + x2)`,
    /// `amp sin(x1 + x2)`.
    pub fn canonical_four(lattice: &Arc<ModeLattice>, amp: f64, seed: u64) -> Self {
        let directions = vec![
            SpectralVorticity::harmonic_cos(lattice, [1, 0], amp),
            SpectralVorticity::harmonic_sin(lattice, [1, 0], amp),
            SpectralVorticity::harmonic_cos(lattice, [1, 1], amp),
            SpectralVorticity::harmonic_sin(lattice, [1, 1], amp),
        ];
        NoiseConfig::new(directions, seed).expect("canonical directions carry energy")
    }

    pub fn directions(&self) -> &[SpectralVorticity] {
        &self.directions
    }

    pub fn dim(&self) -> usize {
        self.directions.len()
    }

    /// Total energy input rate `B0 = sum_i |g_i|^2`.
    pub fn energy_input(&self) -> f64 {
        self.directions.iter().map(|g| g.norm_sq()).sum()
    }
}

/// Parameters of the small-divisor lower bound `dist(k . alpha, Z) >= K /
/// |k|^A`.
#[derive(Debug, Clone, Copy)]
pub struct DiophantineParams {
    pub k: f64,
    pub a: f64,
}

impl DiophantineParams {
    pub fn new(k: f64, a: f64, torus_dim: usize) -> Result<Self> {
        if k <= 0.0 {
            return Err(CoreError::invalid("constant K must be positive"));
        }
        if a <= torus_dim as f64 && torus_dim > 1 {
            return Err(CoreError::invalid(format!(
                "exponent A = {a} must exceed the torus dimension {torus_dim}"
            )));
        }
        Ok(DiophantineParams { k, a })
    }
}

/// Result of an exhaustive small-divisor scan.
#[derive(Debug, Clone)]
pub struct DiophantineReport {
    pub pass: bool,
    /// Scanned margin `min_k dist(k . alpha, Z) |k|^A`.
    pub margin: f64,
    /// Integer vector attaining the margin.
    pub worst_k: Vec<i64>,
    pub kmax: u32,
}

/// Exhaustively scan `0 < max|k_i| <= kmax` and compare the worst margin
/// against `K`.
pub fn diophantine_check(
    alpha: &Frequency,
    params: &DiophantineParams,
    kmax: u32,
) -> Result<DiophantineReport> {
    if kmax < 1 {
        return Err(CoreError::invalid("kmax must be at least 1"));
    }
    guard_scan_range(alpha, kmax)?;
    let mut margin = f64::INFINITY;
    let mut worst_k = Vec::new();
    scan_half_lattice(alpha.dim(), kmax as i64, |k| {
        let dist = dist_to_integers(dot(k, alpha.components()));
        let norm = k.iter().map(|&ki| (ki * ki) as f64).sum::<f64>().sqrt();
        let m = dist * norm.powf(params.a);
        if m < margin {
            margin = m;
            worst_k = k.to_vec();
        }
    });
    Ok(DiophantineReport {
        pass: margin >= params.k,
        margin,
        worst_k,
        kmax,
    })
}

/// Refuse scans where `k . alpha` leaves the integer-exact float range, which
/// would corrupt the fractional part.
fn guard_scan_range(alpha: &Frequency, kmax: u32) -> Result<()> {
    let reach = alpha
        .components()
        .iter()
        .map(|a| a.abs())
        .sum::<f64>()
        * kmax as f64;
    if reach >= (1u64 << 52) as f64 {
        return Err(CoreError::KmaxOverflow { kmax: kmax as i64 });
    }
    Ok(())
}

/// Fitted small-divisor exponent from the record minima of the scan.
#[derive(Debug, Clone)]
pub struct DiophantineFit {
    pub a_fit: f64,
    pub k_fit: f64,
    /// RMS residual of the log-log least-squares fit.
    pub residual: f64,
    pub records: usize,
}

/// Fit `log dist(k . alpha, Z) ~ -A log |k|` over the record minima (wave
/// vectors realizing a new smallest distance, scanned outward by max-norm
/// shell), then report the largest `K` that passes at the fitted `A`.
pub fn fit_diophantine_exponent(alpha: &Frequency, kmax: u32) -> Result<DiophantineFit> {
    if kmax < 100 {
        return Err(CoreError::invalid("exponent fit needs kmax >= 100"));
    }
    guard_scan_range(alpha, kmax)?;

    let mut best = f64::INFINITY;
    let mut records: Vec<[f64; 2]> = Vec::new();
    let mut rational_hit = false;
    for shell in 1..=(kmax as i64) {
        scan_shell(alpha.dim(), shell, |k| {
            let dist = dist_to_integers(dot(k, alpha.components()));
            if dist < best {
                best = dist;
                if dist < 1e-15 {
                    rational_hit = true;
                    return;
                }
                let norm = k.iter().map(|&ki| (ki * ki) as f64).sum::<f64>().sqrt();
                records.push([norm.ln(), dist.ln()]);
            }
        });
        if rational_hit {
            break;
        }
    }
    if rational_hit {
        return Err(CoreError::DegenerateFit {
            detail: "frequency resolves to a rational within the scan".into(),
        });
    }
    if records.len() < 3 {
        return Err(CoreError::DegenerateFit {
            detail: format!("only {} record minima below kmax {kmax}", records.len()),
        });
    }

    let (slope, intercept, residual) = least_squares(&records);
    let a_fit = -slope;
    let _ = intercept;

    // Largest K passing at the fitted exponent: the scanned margin itself.
    let k_fit = diophantine_check(
        alpha,
        &DiophantineParams {
            k: f64::MIN_POSITIVE,
            a: a_fit,
        },
        kmax,
    )?
    .margin;
    Ok(DiophantineFit {
        a_fit,
        k_fit,
        residual,
        records: records.len(),
    })
}

/// Visit half-lattice vectors with `max|k_i|` exactly `shell`, touching only
/// the shell surface: the leading `dim - 1` coordinates range over the full
/// cube, and the last one is free only when an earlier coordinate already
/// sits on the boundary.
fn scan_shell(dim: usize, shell: i64, mut visit: impl FnMut(&[i64])) {
    let mut k = vec![-shell; dim];
    let head = dim - 1;
    loop {
        if k[..head].iter().any(|&c| c.abs() == shell) {
            for last in -shell..=shell {
                k[head] = last;
                emit_half(&k, &mut visit);
            }
        } else {
            for last in [-shell, shell] {
                k[head] = last;
                emit_half(&k, &mut visit);
            }
        }
        // Odometer over the leading coordinates only.
        let mut i = head;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if k[i] < shell {
                k[i] += 1;
                break;
            }
            k[i] = -shell;
        }
    }
}

fn emit_half(k: &[i64], visit: &mut impl FnMut(&[i64])) {
    if let Some(first) = k.iter().find(|&&c| c != 0) {
        if *first > 0 {
            visit(k);
        }
    }
}

/// Ordinary least squares for `y ~ intercept + slope x` on `[x, y]` rows;
/// returns (slope, intercept, rms residual).
fn least_squares(rows: &[[f64; 2]]) -> (f64, f64, f64) {
    let n = rows.len() as f64;
    let sx: f64 = rows.iter().map(|r| r[0]).sum();
    let sy: f64 = rows.iter().map(|r| r[1]).sum();
    let sxx: f64 = rows.iter().map(|r| r[0] * r[0]).sum();
    let sxy: f64 = rows.iter().map(|r| r[0] * r[1]).sum();
    let denom = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let ss: f64 = rows
        .iter()
        .map(|r| (r[1] - intercept - slope * r[0]).powi(2))
        .sum();
    (slope, intercept, (ss / n).sqrt())
}
