//! Observables and limit-theorem experiments for the homogenized process
//! (field, torus angle).
//!
//! The module provides a catalog of scalar observables with certified growth
//! envelopes, centering against the estimated invariant measures along the
//! torus, a Monte Carlo corrector, the martingale decomposition of centered
//! time integrals, law-of-large-numbers and central-limit runs with rate
//! fits, Birkhoff averages under the irrational rotation, two exact
//! algebraic identities used by the moment analysis, and direct Monte Carlo
//! checks of the exponential moment and coupling continuity bounds.

use std::f64::consts::TAU;

use serde::Serialize;

use crate::fit::{ks_against_normal, ols, power_fit, rate_fit, weighted_degenerate_gap, LinearFit, RateFit};
use crate::forcing::{rotate, Frequency, NoiseConfig, QuasiPeriodicForce, TorusPoint};
use crate::integrator::{
    evolve_ensemble_sampled, pullback_ensemble, run_sampled, simulate_observed, SimConfig, Stepper,
    Trajectory, WienerPath,
};
use crate::reduce::{mean, mean_with_se, pairwise_sum, par_map_indexed, variance_with_se};
use crate::spectral::SpectralVorticity;
use crate::transport::EmpiricalMeasure;
use crate::{CoreError, Result};

/// Snap a time span onto the step grid, refusing spans that are not within
/// rounding distance of a whole number of steps.
fn grid_steps(span: f64, dt: f64, what: &str) -> Result<i64> {
    let j = (span / dt).round();
    if (j * dt - span).abs() > 1e-9 * span.abs().max(1.0) {
        return Err(CoreError::invalid(format!(
            "{what} {span} does not sit on the dt = {dt} grid"
        )));
    }
    Ok(j as i64)
}

/// The observable catalog. Each entry has a closed-form envelope constant,
/// so arbitrary user code never enters the statistical machinery with an
/// unverifiable growth claim.
#[derive(Debug, Clone, Serialize)]
pub enum ObservableKind {
    /// Squared norm of the field.
    Energy,
    /// Real part of the stored coefficient at a wave vector.
    ModeRe([i32; 2]),
    /// Imaginary part of the stored coefficient at a wave vector.
    ModeIm([i32; 2]),
    /// `tanh(Re c(k) / scale)`: bounded and Lipschitz.
    TanhMode { k: [i32; 2], scale: f64 },
    /// `exp(eta' |w|^2)` with `eta'` at most the envelope growth parameter.
    ExpWeighted { eta_prime: f64 },
}

/// A scalar observable together with its certified envelope
/// `|phi(w)| <= norm_bound * exp(eta |w|^2)` and the Holder exponent of its
/// regularity class.
#[derive(Debug, Clone, Serialize)]
pub struct Observable {
    pub kind: ObservableKind,
    /// Growth parameter of the envelope weight.
    pub eta: f64,
    /// Holder exponent in the field argument.
    pub gamma: f64,
    /// Envelope constant; see the per-constructor derivations.
    pub norm_bound: f64,
}

impl Observable {
    /// `|w|^2`. The envelope constant is `1 / (e eta)`: the maximum of
    /// `x exp(-eta x)` over `x >= 0` sits at `x = 1/eta`.
    pub fn energy(eta: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(CoreError::invalid("energy observable needs eta > 0"));
        }
        Ok(Observable {
            kind: ObservableKind::Energy,
            eta,
            gamma: 1.0,
            norm_bound: 1.0 / (std::f64::consts::E * eta),
        })
    }

    /// `Re c(k)`. Since `|w|^2 = 8 pi^2 sum |c|^2`, any single coefficient
    /// obeys `|c(k)| <= |w| / (2 sqrt(2) pi)`, and the maximum of
    /// `r exp(-eta r^2)` is `1 / sqrt(2 eta e)`, giving the envelope
    /// constant `1 / (4 pi sqrt(eta e))`.
    pub fn mode_re(k: [i32; 2], eta: f64) -> Result<Self> {
        Ok(Observable {
            kind: ObservableKind::ModeRe(k),
            ..Self::mode_template(k, eta)?
        })
    }

    /// `Im c(k)`; same envelope as the real part.
    pub fn mode_im(k: [i32; 2], eta: f64) -> Result<Self> {
        Ok(Observable {
            kind: ObservableKind::ModeIm(k),
            ..Self::mode_template(k, eta)?
        })
    }

    fn mode_template(k: [i32; 2], eta: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(CoreError::invalid("mode observable needs eta > 0"));
        }
        if k == [0, 0] {
            return Err(CoreError::invalid(
                "mode observable needs a nonzero wave vector",
            ));
        }
        let pi = std::f64::consts::PI;
        Ok(Observable {
            kind: ObservableKind::ModeRe(k),
            eta,
            gamma: 1.0,
            norm_bound: 1.0 / (4.0 * pi * (eta * std::f64::consts::E).sqrt()),
        })
    }

    /// `tanh(Re c(k) / scale)`: bounded by one, so any `eta >= 0` works.
    pub fn tanh_mode(k: [i32; 2], scale: f64, eta: f64) -> Result<Self> {
        if !(scale > 0.0) || !(eta >= 0.0) {
            return Err(CoreError::invalid(
                "tanh observable needs scale > 0 and eta >= 0",
            ));
        }
        if k == [0, 0] {
            return Err(CoreError::invalid(
                "mode observable needs a nonzero wave vector",
            ));
        }
        Ok(Observable {
            kind: ObservableKind::TanhMode { k, scale },
            eta,
            gamma: 1.0,
            norm_bound: 1.0,
        })
    }

    /// `exp(eta' |w|^2)`, dominated by the envelope whenever
    /// `eta' <= eta`.
    pub fn exp_weighted(eta_prime: f64, eta: f64) -> Result<Self> {
        if !(eta_prime >= 0.0 && eta_prime <= eta) {
            return Err(CoreError::invalid(
                "weighted-exponential observable needs 0 <= eta' <= eta",
            ));
        }
        Ok(Observable {
            kind: ObservableKind::ExpWeighted { eta_prime },
            eta,
            gamma: 1.0,
            norm_bound: 1.0,
        })
    }

    pub fn eval(&self, w: &SpectralVorticity) -> f64 {
        match &self.kind {
            ObservableKind::Energy => w.norm_sq(),
            ObservableKind::ModeRe(k) => w.coeff(*k).re,
            ObservableKind::ModeIm(k) => w.coeff(*k).im,
            ObservableKind::TanhMode { k, scale } => (w.coeff(*k).re / scale).tanh(),
            ObservableKind::ExpWeighted { eta_prime } => (eta_prime * w.norm_sq()).exp(),
        }
    }

    /// Envelope value at `w`; `|eval(w)| <= envelope(w)` for every field.
    pub fn envelope(&self, w: &SpectralVorticity) -> f64 {
        self.norm_bound * (self.eta * w.norm_sq()).exp()
    }
}

/// Estimated invariant measures along the torus: one empirical measure per
/// point of a product grid, addressed by nearest grid point.
#[derive(Debug, Clone)]
pub struct MeasurePath {
    dim: usize,
    grid_per_dim: usize,
    measures: Vec<EmpiricalMeasure>,
}

impl MeasurePath {
    /// Wrap precomputed measures; `measures` is indexed with the first
    /// angle component most significant.
    pub fn from_measures(
        dim: usize,
        grid_per_dim: usize,
        measures: Vec<EmpiricalMeasure>,
    ) -> Result<Self> {
        if dim == 0 || grid_per_dim == 0 {
            return Err(CoreError::invalid("measure path needs a nonempty grid"));
        }
        let expected = grid_per_dim
            .checked_pow(dim as u32)
            .ok_or_else(|| CoreError::invalid("measure path grid overflows"))?;
        if measures.len() != expected {
            return Err(CoreError::invalid(format!(
                "measure path needs {expected} cells, got {}",
                measures.len()
            )));
        }
        let radius = measures[0].particles()[0].lattice().radius();
        for m in &measures {
            if m.particles()[0].lattice().radius() != radius {
                return Err(CoreError::invalid("measure path cells must share a lattice"));
            }
        }
        Ok(MeasurePath {
            dim,
            grid_per_dim,
            measures,
        })
    }

    pub fn grid_len(&self) -> usize {
        self.measures.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid_point(&self, idx: usize) -> TorusPoint {
        assert!(idx < self.measures.len());
        let g = self.grid_per_dim;
        let mut rem = idx;
        let mut comps = vec![0.0; self.dim];
        for d in (0..self.dim).rev() {
            comps[d] = (rem % g) as f64 * TAU / g as f64;
            rem /= g;
        }
        TorusPoint::new(comps)
    }

    /// Index of the grid point closest to `h` (componentwise rounding; the
    /// grid is a product of uniform one-dimensional grids, so this is the
    /// true nearest cell).
    pub fn nearest_index(&self, h: &TorusPoint) -> usize {
        assert_eq!(h.dim(), self.dim);
        let g = self.grid_per_dim;
        let mut idx = 0usize;
        for &c in h.components() {
            let cell = (c * g as f64 / TAU).round() as usize % g;
            idx = idx * g + cell;
        }
        idx
    }

    pub fn measure_at(&self, h: &TorusPoint) -> &EmpiricalMeasure {
        &self.measures[self.nearest_index(h)]
    }

    pub fn measure(&self, idx: usize) -> &EmpiricalMeasure {
        &self.measures[idx]
    }

    /// Mean of the observable under the measure at the nearest grid point.
    pub fn mean_at(&self, h: &TorusPoint, phi: &Observable) -> f64 {
        self.measure_at(h).expect(|w| phi.eval(w))
    }

    /// Per-cell means of the observable, indexed like the grid.
    pub fn grid_values(&self, phi: &Observable) -> Vec<f64> {
        self.measures
            .iter()
            .map(|m| m.expect(|w| phi.eval(w)))
            .collect()
    }

    /// Uniform average over the grid of a per-cell functional, the product
    /// quadrature of the rotation-invariant measure on the torus.
    pub fn torus_average(&self, mut f: impl FnMut(&TorusPoint, &EmpiricalMeasure) -> f64) -> f64 {
        let vals: Vec<f64> = (0..self.measures.len())
            .map(|i| f(&self.grid_point(i), &self.measures[i]))
            .collect();
        mean(&vals)
    }
}

/// Estimate the invariant-measure path on a product grid by pullback
/// ensembles from the zero field; grid cell `i` draws trajectory ids
/// `id_base + i * particles ..`.
pub fn estimate_measure_path(
    config: &SimConfig,
    force: &QuasiPeriodicForce,
    noise: &NoiseConfig,
    grid_per_dim: usize,
    t_back: f64,
    particles: usize,
    id_base: u64,
) -> Result<MeasurePath> {
    let dim = force.frequency.dim();
    if grid_per_dim == 0 || particles == 0 {
        return Err(CoreError::invalid("measure path needs cells and particles"));
    }
    let total = grid_per_dim
        .checked_pow(dim as u32)
        .filter(|&t| t <= 4096)
        .ok_or_else(|| CoreError::invalid("torus grid too fine for the measure path"))?;
    let w0 = SpectralVorticity::zeros(&config.lattice);
    let mut measures = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut comps = vec![0.0; dim];
        for d in (0..dim).rev() {
            comps[d] = (rem % grid_per_dim) as f64 * TAU / grid_per_dim as f64;
            rem /= grid_per_dim;
        }
        let h = TorusPoint::new(comps);
        let finals = pullback_ensemble(
            config,
            force,
            noise,
            t_back,
            &h,
            &w0,
            particles,
            id_base + (idx * particles) as u64,
        )?;
        measures.push(EmpiricalMeasure::uniform(finals)?);
    }
    MeasurePath::from_measures(dim, grid_per_dim, measures)
}

/// An observable minus its instantaneous invariant-measure mean, the
/// integrand of every limit-theorem statistic.
#[derive(Debug, Clone)]
pub struct CenteredObservable<'a> {
    base: Observable,
    path: &'a MeasurePath,
    grid_means: Vec<f64>,
}

/// Attach an observable to a measure path; cell means are precomputed.
pub fn center<'a>(base: Observable, path: &'a MeasurePath) -> CenteredObservable<'a> {
    let grid_means = path.grid_values(&base);
    CenteredObservable {
        base,
        path,
        grid_means,
    }
}

impl CenteredObservable<'_> {
    pub fn base(&self) -> &Observable {
        &self.base
    }

    /// The value subtracted at angle `h`.
    pub fn mean_at(&self, h: &TorusPoint) -> f64 {
        self.grid_means[self.path.nearest_index(h)]
    }

    pub fn eval(&self, w: &SpectralVorticity, h: &TorusPoint) -> f64 {
        self.base.eval(w) - self.mean_at(h)
    }
}

/// How the time-average engine turns the raw observable into its centered
/// integrand.
pub enum CenteringMode<'a> {
    /// No subtraction; for observables that are already mean zero under the
    /// invariant law (closed-form test configurations).
    None,
    /// Subtract the estimated invariant-measure mean at the nearest torus
    /// grid point.
    Path(&'a MeasurePath),
    /// Subtract, at every time step, the mean over the other ensemble
    /// members. Unbiased for the instantaneous ensemble mean, transient
    /// included, so decay fits are not floored by a measure estimate's
    /// particle error.
    LeaveOneOut,
}

/// Time averages `A(T) = (1/T) int_s^{s+T} integrand dt` for an ensemble,
/// reported at every horizon; outer index horizon, inner index member.
/// Member `m` reads its noise from trajectory id `id_base + m`. Trapezoid
/// quadrature on the step grid throughout.
#[allow(clippy::too_many_arguments)]
pub fn time_average_ensemble(
    config: &SimConfig,
    force: &QuasiPeriodicForce,
    noise: &NoiseConfig,
    s: f64,
    horizons: &[f64],
    h_start: &TorusPoint,
    w0: &SpectralVorticity,
    members: usize,
    id_base: u64,
    phi: &Observable,
    centering: &CenteringMode,
) -> Result<Vec<Vec<f64>>> {
    if members == 0 || horizons.is_empty() {
        return Err(CoreError::invalid(
            "time averages need at least one member and one horizon",
        ));
    }
    let dt = config.dt;
    let mut steps = Vec::with_capacity(horizons.len());
    for &t in horizons {
        let j = grid_steps(t - s, dt, "horizon")?;
        if j < 1 {
            return Err(CoreError::invalid("horizons must exceed the start time"));
        }
        if steps.last().is_some_and(|&last| j <= last) {
            return Err(CoreError::invalid("horizons must be strictly increasing"));
        }
        steps.push(j);
    }
    let total = *steps.last().expect("nonempty horizons");
    let end = s + total as f64 * dt;
    let path_centering: Option<(&MeasurePath, Vec<f64>)> = match centering {
        CenteringMode::Path(path) => Some((path, path.grid_values(phi))),
        CenteringMode::LeaveOneOut if members < 2 => {
            return Err(CoreError::invalid(
                "leave-one-out centering needs at least two members",
            ));
        }
        _ => None,
    };

    let columns = if matches!(centering, CenteringMode::LeaveOneOut) {
        // The cross-member mean is only known after all members ran, so
        // keep the full per-step columns and subtract afterwards.
        let cols: Vec<Result<Vec<f64>>> = par_map_indexed(members, |m| {
            let mut stepper = Stepper::new(config.clone(), force.clone(), noise.clone())?;
            let wiener = WienerPath::new(noise.seed, id_base + m as u64);
            let mut col = Vec::with_capacity(total as usize + 1);
            simulate_observed(&mut stepper, s, end, h_start, w0, &wiener, |_, _, _, w, _| {
                col.push(phi.eval(w));
            })?;
            Ok(col)
        });
        let mut cols: Vec<Vec<f64>> = cols.into_iter().collect::<Result<_>>()?;
        for j in 0..=total as usize {
            let snapshot: Vec<f64> = cols.iter().map(|c| c[j]).collect();
            let sum = pairwise_sum(&snapshot);
            for (col, &own) in cols.iter_mut().zip(&snapshot) {
                col[j] = own - (sum - own) / (members as f64 - 1.0);
            }
        }
        cols
    } else {
        let rows: Vec<Result<Vec<f64>>> = par_map_indexed(members, |m| {
            let mut stepper = Stepper::new(config.clone(), force.clone(), noise.clone())?;
            let wiener = WienerPath::new(noise.seed, id_base + m as u64);
            let mut prev = 0.0;
            let mut cum = 0.0;
            let mut cursor = 0usize;
            let mut out = vec![0.0; steps.len()];
            simulate_observed(&mut stepper, s, end, h_start, w0, &wiener, |j, _, h, w, _| {
                let mut v = phi.eval(w);
                if let Some((path, means)) = &path_centering {
                    v -= means[path.nearest_index(h)];
                }
                if j > 0 {
                    cum += 0.5 * dt * (prev + v);
                }
                prev = v;
                if cursor < steps.len() && j == steps[cursor] {
                    out[cursor] = cum / (steps[cursor] as f64 * dt);
                    cursor += 1;
                }
            })?;
            Ok(out)
        });
        let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
        return Ok((0..steps.len())
            .map(|i| rows.iter().map(|r| r[i]).collect())
            .collect());
    };

    // Integrate the leave-one-out columns.
    let mut out = vec![vec![0.0; members]; steps.len()];
    for (m, col) in columns.iter().enumerate() {
        let mut cum = 0.0;
        let mut cursor = 0usize;
        for j in 1..col.len() {
            cum += 0.5 * dt * (col[j - 1] + col[j]);
            if cursor < steps.len() && steps[cursor] == j as i64 {
                out[cursor][m] = cum / (steps[cursor] as f64 * dt);
                cursor += 1;
            }
        }
    }
    Ok(out)
}

/// Ensemble mean of the centered observable at each grid time, fitted to an
/// exponential decay. The fitted rate is the empirical mixing speed of the
/// observable.
#[allow(clippy::too_many_arguments)]
pub fn centered_mean_decay(
    config: &SimConfig,
    force: &QuasiPeriodicForce,
    noise: &NoiseConfig,
    w0: &SpectralVorticity,
    h_start: &TorusPoint,
    times: &[f64],
    members: usize,
    id_base: u64,
    phi: &Observable,
    centering: &CenteringMode,
) -> Result<(Vec<f64>, RateFit)> {
    if members < 2 {
        return Err(CoreError::invalid("mean decay needs at least two members"));
    }
    let starts = vec![w0.clone(); members];
    let by_time = evolve_ensemble_sampled(config, force, noise, 0.0, times, h_start, &starts, id_base)?;
    let path_means: Option<(&MeasurePath, Vec<f64>)> = match centering {
        CenteringMode::Path(path) => Some((path, path.grid_values(phi))),
        CenteringMode::LeaveOneOut => {
            return Err(CoreError::invalid(
                "mean decay centers against a measure path or nothing",
            ));
        }
        CenteringMode::None => None,
    };
    let mut abs_means = Vec::with_capacity(times.len());
    for (ti, states) in by_time.iter().enumerate() {
        let h = rotate(h_start, &force.frequency, times[ti]);
        let vals: Vec<f64> = states
            .iter()
            .map(|w| {
                let mut v = phi.eval(w);
                if let Some((path, means)) = &path_means {
                    v -= means[path.nearest_index(&h)];
                }
                v
            })
            .collect();
        abs_means.push(mean(&vals).abs());
    }
    let fit = rate_fit(times, &abs_means, 0.0)?;
    Ok((abs_means, fit))
}

/// Monte Carlo estimate of the corrector: the integral of the expected
/// centered observable along trajectories from one state, truncated at a
/// finite horizon, with the discarded tail bounded through a fitted mixing
/// rate.
#[derive(Debug, Clone, Serialize)]
pub struct CorrectorEstimate {
    pub value: f64,
    pub se: f64,
    /// Bound on the discarded tail, `prefactor exp(-rate t_chi) / rate`
    /// from the supplied decay fit; infinite when no fit is supplied.
    pub tail_bound: f64,
    /// Tail bound within the requested tolerance.
    pub tail_ok: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_corrector(
    config: &SimConfig,
    force: &QuasiPeriodicForce,
    noise: &NoiseConfig,
    w: &SpectralVorticity,
    h: &TorusPoint,
    t_chi: f64,
    members: usize,
    id_base: u64,
    phi_tilde: &(impl Fn(&SpectralVorticity, &TorusPoint) -> f64 + Sync),
    mixing: Option<&RateFit>,
    tail_tolerance: f64,
) -> Result<CorrectorEstimate> {
    if !(t_chi > 0.0) || members < 2 {
        return Err(CoreError::invalid(
            "corrector needs a positive horizon and at least two members",
        ));
    }
    let dt = config.dt;
    grid_steps(t_chi, dt, "corrector horizon")?;
    let integrals: Vec<Result<f64>> = par_map_indexed(members, |m| {
        let mut stepper = Stepper::new(config.clone(), force.clone(), noise.clone())?;
        let wiener = WienerPath::new(noise.seed, id_base + m as u64);
        let mut prev = 0.0;
        let mut cum = 0.0;
        simulate_observed(&mut stepper, 0.0, t_chi, h, w, &wiener, |j, _, hj, wj, _| {
            let v = phi_tilde(wj, hj);
            if j > 0 {
                cum += 0.5 * dt * (prev + v);
            }
            prev = v;
        })?;
        Ok(cum)
    });
    let integrals: Vec<f64> = integrals.into_iter().collect::<Result<_>>()?;
    let (value, se) = mean_with_se(&integrals);
    let tail_bound = match mixing {
        Some(fit) if fit.exponent < 0.0 => {
            let rate = -fit.exponent;
            fit.prefactor * (-rate * t_chi).exp() / rate
        }
        _ => f64::INFINITY,
    };
    Ok(CorrectorEstimate {
        value,
        se,
        tail_bound,
        tail_ok: tail_bound <= tail_tolerance,
    })
}

/// Splitting of a centered time integral into a martingale part read at
/// integer times plus a boundary remainder.
#[derive(Debug, Clone, Serialize)]
pub struct MartingaleDecomposition {
    /// Martingale values at integer times, first entry zero.
    pub m: Vec<f64>,
    /// Increments `m[j] - m[j-1]`.
    pub z: Vec<f64>,
    /// What is left of the full integral after the martingale part.
    pub remainder: f64,
    /// Corrector values at integer times.
    pub chi: Vec<f64>,
    /// Integrand values at integer times.
    pub phi_at_nodes: Vec<f64>,
    /// Trapezoid integral of the integrand over the whole span.
    pub integral_full: f64,
}

/// Decompose one trajectory. The trajectory must carry every step (built
/// with `sample_every = 1`) and the step size must divide one time unit so
/// integer times sit on the grid. With corrector `chi` and integrand
/// `phi_tilde`, the martingale at integer time `j` is
/// `chi(X_j) - chi(X_0) + int_0^j phi_tilde`.
pub fn martingale_decompose(
    traj: &Trajectory,
    phi_tilde: impl Fn(&SpectralVorticity, &TorusPoint) -> f64,
    chi: impl Fn(&SpectralVorticity, &TorusPoint) -> f64,
) -> Result<MartingaleDecomposition> {
    let dt = traj.dt;
    let steps = traj.samples.len().saturating_sub(1);
    if steps == 0 {
        return Err(CoreError::invalid("decomposition needs a nonempty span"));
    }
    for pair in traj.samples.windows(2) {
        if (pair[1].t - pair[0].t - dt).abs() > 1e-9 {
            return Err(CoreError::invalid(
                "decomposition needs per-step samples; rebuild with sample_every = 1",
            ));
        }
    }
    let per_unit = grid_steps(1.0, dt, "unit time")?;
    if per_unit < 1 {
        return Err(CoreError::invalid("step size larger than one time unit"));
    }
    let per_unit = per_unit as usize;
    let n = steps / per_unit;

    let phis: Vec<f64> = traj
        .samples
        .iter()
        .map(|s| phi_tilde(&s.w, &s.h))
        .collect();
    let mut cum = vec![0.0; steps + 1];
    for j in 1..=steps {
        cum[j] = cum[j - 1] + 0.5 * dt * (phis[j - 1] + phis[j]);
    }
    let mut m = Vec::with_capacity(n + 1);
    let mut chis = Vec::with_capacity(n + 1);
    let mut phi_nodes = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let idx = j * per_unit;
        let sample = &traj.samples[idx];
        chis.push(chi(&sample.w, &sample.h));
        phi_nodes.push(phis[idx]);
        m.push(chis[j] - chis[0] + cum[idx]);
    }
    let z = m.windows(2).map(|p| p[1] - p[0]).collect();
    let integral_full = cum[steps];
    let remainder = integral_full - m[n];
    Ok(MartingaleDecomposition {
        m,
        z,
        remainder,
        chi: chis,
        phi_at_nodes: phi_nodes,
        integral_full,
    })
}

/// Statistical check that the decomposition's increments behave like
/// martingale differences across an ensemble.
#[derive(Debug, Clone, Serialize)]
pub struct MartingaleReport {
    /// Regression of each increment on the integrand value one unit
    /// earlier, pooled over members and times.
    pub regression: LinearFit,
    pub slope_ci_contains_zero: bool,
    pub intercept_ci_contains_zero: bool,
    /// Ensemble mean of the martingale per integer time (skipping time 0).
    pub mean_m: Vec<f64>,
    pub mean_m_se: Vec<f64>,
    /// Every per-time mean within three standard errors of zero.
    pub drift_ok: bool,
    pub pass: bool,
}

pub fn test_martingale_property(decomps: &[MartingaleDecomposition]) -> Result<MartingaleReport> {
    if decomps.len() < 100 {
        return Err(CoreError::invalid(
            "martingale check needs at least 100 trajectories",
        ));
    }
    let n = decomps[0].z.len();
    if n == 0 || decomps.iter().any(|d| d.z.len() != n) {
        return Err(CoreError::invalid(
            "martingale check needs equal-length nonempty decompositions",
        ));
    }
    let mut xs = Vec::with_capacity(decomps.len() * n);
    let mut ys = Vec::with_capacity(decomps.len() * n);
    for d in decomps {
        for j in 0..n {
            xs.push(d.phi_at_nodes[j]);
            ys.push(d.z[j]);
        }
    }
    let regression = ols(&xs, &ys)?;
    let slope_ok = regression.slope.abs() <= 3.0 * regression.slope_se;
    let intercept_ok = regression.intercept.abs() <= 3.0 * regression.intercept_se;
    let mut mean_m = Vec::with_capacity(n);
    let mut mean_m_se = Vec::with_capacity(n);
    let mut drift_ok = true;
    for j in 1..=n {
        let vals: Vec<f64> = decomps.iter().map(|d| d.m[j]).collect();
        let (mm, se) = mean_with_se(&vals);
        drift_ok &= mm.abs() <= 3.0 * se;
        mean_m.push(mm);
        mean_m_se.push(se);
    }
    Ok(MartingaleReport {
        regression,
        slope_ci_contains_zero: slope_ok,
        intercept_ci_contains_zero: intercept_ok,
        mean_m,
        mean_m_se,
        drift_ok,
        pass: slope_ok && intercept_ok && drift_ok,
    })
}

/// Law-of-large-numbers run: time averages of the centered observable over
/// a widening horizon grid, with a power-law fit of the mean absolute
/// average against the horizon.
#[derive(Debug, Clone, Serialize)]
pub struct SllnReport {
    pub horizons: Vec<f64>,
    /// Per-horizon per-member time averages.
    pub samples: Vec<Vec<f64>>,
    pub mean_abs: Vec<f64>,
    pub mean_abs_se: Vec<f64>,
    /// Power fit of the mean absolute average against the horizon; absent
    /// when censoring leaves too few points.
    pub fit: Option<RateFit>,
}

#[allow(clippy::too_many_arguments)]
pub fn slln_run(
    config: &SimConfig,
    force: &QuasiPeriodicForce,
    noise: &NoiseConfig,
    s: f64,
    horizons: &[f64],
    h_start: &TorusPoint,
    w0: &SpectralVorticity,
    members: usize,
    id_base: u64,
    phi: &Observable,
    centering: &CenteringMode,
    noise_floor: f64,
) -> Result<SllnReport> {
    let durations: Vec<f64> = horizons.iter().map(|&t| t - s).collect();
    if durations.len() < 3
        || durations[0] <= 0.0
        || durations[durations.len() - 1] / durations[0] < 31.6
    {
        return Err(CoreError::invalid(
            "horizon grid must span at least one and a half decades",
        ));
    }
    let samples = time_average_ensemble(
        config, force, noise, s, horizons, h_start, w0, members, id_base, phi, centering,
    )?;
    let mut mean_abs = Vec::with_capacity(samples.len());
    let mut mean_abs_se = Vec::with_capacity(samples.len());
    for row in &samples {
        let abs: Vec<f64> = row.iter().map(|a| a.abs()).collect();
        let (m, se) = mean_with_se(&abs);
        mean_abs.push(m);
        mean_abs_se.push(se);
    }
    let fit = power_fit(&durations, &mean_abs, noise_floor).ok();
    Ok(SllnReport {
        horizons: horizons.to_vec(),
        samples,
        mean_abs,
        mean_abs_se,
        fit,
    })
}

/// Decay of the even moments of the time average against the horizon.
#[derive(Debug, Clone, Serialize)]
pub struct MomentRateReport {
    pub p: u32,
    pub durations: Vec<f64>,
    pub moments: Vec<f64>,
    pub moment_ses: Vec<f64>,
    pub fit: RateFit,
    /// Fitted slope at or below `-p + 0.15`.
    pub pass: bool,
}

/// Fit the `2p`-th moment of the time averages against the duration grid.
/// Moment orders above two demand sample sizes far past desk scale, so only
/// `p = 1, 2` are accepted; a relative-error guard rejects ensembles too
/// small for the requested moment.
pub fn moment_rate_check(
    durations: &[f64],
    samples: &[Vec<f64>],
    p: u32,
    floor: f64,
) -> Result<MomentRateReport> {
    if !(p == 1 || p == 2) {
        return Err(CoreError::invalid("moment order must be 1 or 2"));
    }
    if durations.len() != samples.len() {
        return Err(CoreError::invalid("moment grid and samples disagree"));
    }
    let mut moments = Vec::with_capacity(samples.len());
    let mut moment_ses = Vec::with_capacity(samples.len());
    for (i, row) in samples.iter().enumerate() {
        let powered: Vec<f64> = row.iter().map(|a| a.powi(2 * p as i32)).collect();
        let (m, se) = mean_with_se(&powered);
        if m > floor && se > 0.5 * m {
            return Err(CoreError::EstimatorUnstable {
                detail: format!(
                    "moment of order {} at duration {} has relative error {:.2}; grow the ensemble",
                    2 * p,
                    durations[i],
                    se / m
                ),
            });
        }
        moments.push(m);
        moment_ses.push(se);
    }
    let fit = power_fit(durations, &moments, floor)?;
    let pass = fit.exponent <= -(p as f64) + 0.15;
    Ok(MomentRateReport {
        p,
        durations: durations.to_vec(),
        moments,
        moment_ses,
        fit,
        pass,
    })
}

/// Central-limit run: scaled integrals at the final horizon compared against
/// a centered normal reference, with the distance curve along a sweep grid.
#[derive(Debug, Clone, Serialize)]
pub struct CltReport {
    /// Final duration.
    pub duration: f64,
    /// `sqrt(T) A(T)` per member at the final horizon.
    pub samples: Vec<f64>,
    pub sigma_sq_sample: f64,
    pub sigma_sq_sample_se: f64,
    pub sigma_sq_ref: f64,
    pub ks_distance: f64,
    /// Reference variance treated as zero; the bounded comparison statistic
    /// is the meaningful one in that case.
    pub degenerate: bool,
    /// Gap between the clipped sample mean and its normal reference value.
    pub weighted_gap: f64,
    /// `(duration, distance)` along the sweep grid.
    pub sweep: Vec<(f64, f64)>,
}

#[allow(clippy::too_many_arguments)]
pub fn clt_run(
    config: &SimConfig,
    force: &QuasiPeriodicForce,
    noise: &NoiseConfig,
    s: f64,
    horizons: &[f64],
    h_start: &TorusPoint,
    w0: &SpectralVorticity,
    members: usize,
    id_base: u64,
    phi: &Observable,
    centering: &CenteringMode,
    sigma_sq_ref: f64,
) -> Result<CltReport> {
    if members < 500 {
        return Err(CoreError::invalid(
            "central-limit run needs at least 500 members",
        ));
    }
    let samples_by_h = time_average_ensemble(
        config, force, noise, s, horizons, h_start, w0, members, id_base, phi, centering,
    )?;
    let mut sweep = Vec::with_capacity(horizons.len());
    let mut final_scaled = Vec::new();
    for (i, row) in samples_by_h.iter().enumerate() {
        let duration = horizons[i] - s;
        let scaled: Vec<f64> = row.iter().map(|a| a * duration.sqrt()).collect();
        sweep.push((duration, ks_against_normal(&scaled, sigma_sq_ref)));
        if i == samples_by_h.len() - 1 {
            final_scaled = scaled;
        }
    }
    let duration = horizons[horizons.len() - 1] - s;
    let (sigma_sq_sample, sigma_sq_sample_se) = variance_with_se(&final_scaled);
    let ks_distance = sweep[sweep.len() - 1].1;
    let weighted_gap = weighted_degenerate_gap(&final_scaled, sigma_sq_ref);
    Ok(CltReport {
        duration,
        samples: final_scaled,
        sigma_sq_sample,
        sigma_sq_sample_se,
        sigma_sq_ref,
        ks_distance,
        degenerate: sigma_sq_ref <= 1e-12,
        weighted_gap,
        sweep,
    })
}

/// A scalar estimate with its standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct VarianceEstimate {
    pub value: f64,
    pub se: f64,
}

/// Asymptotic variance by the direct route: the mean of `T A(T)^2` over an
/// ensemble at one horizon.
#[allow(clippy::too_many_arguments)]
pub fn estimate_sigma2_direct(
    config: &SimConfig,
    force: &QuasiPeriodicForce,
    noise: &NoiseConfig,
    s: f64,
    t: f64,
    h_start: &TorusPoint,
    w0: &SpectralVorticity,
    members: usize,
    id_base: u64,
    phi: &Observable,
    centering: &CenteringMode,
) -> Result<VarianceEstimate> {
    let samples = time_average_ensemble(
        config,
        force,
        noise,
        s,
        &[t],
        h_start,
        w0,
        members,
        id_base,
        phi,
        centering,
    )?;
    let duration = t - s;
    let sq: Vec<f64> = samples[0].iter().map(|a| a * a * duration).collect();
    let (value, se) = mean_with_se(&sq);
    Ok(VarianceEstimate { value, se })
}

/// Simulation inputs for the one-unit martingale moment used by the
/// invariant-measure route to the asymptotic variance.
pub struct SigmaMcConfig<'a> {
    pub config: &'a SimConfig,
    pub force: &'a QuasiPeriodicForce,
    pub noise: &'a NoiseConfig,
    /// Paths per particle for the one-unit moment.
    pub members: usize,
    pub id_base: u64,
}

/// The two invariant-measure routes to the asymptotic variance.
#[derive(Debug, Clone, Serialize)]
pub struct Sigma2Report {
    /// Twice the torus-averaged measure mean of `integrand * corrector`.
    pub product_route: VarianceEstimate,
    /// Torus average of the measure mean of the one-unit martingale second
    /// moment.
    pub y_route: VarianceEstimate,
    /// Per-cell values of the second-moment mean, indexed like the grid.
    pub y_cell_means: Vec<f64>,
    /// Routes agree within three combined standard errors.
    pub consistent: bool,
}

/// Estimate the asymptotic variance from the measure path, both as the
/// product formula and through the one-unit martingale moment. The error
/// bars cover particle spread and path noise; both routes share the same
/// measure estimate, so its own sampling error partially cancels in the
/// comparison.
pub fn estimate_sigma2_corrector(
    path: &MeasurePath,
    phi_tilde: &(impl Fn(&SpectralVorticity, &TorusPoint) -> f64 + Sync),
    chi: &(impl Fn(&SpectralVorticity, &TorusPoint) -> f64 + Sync),
    mc: &SigmaMcConfig<'_>,
) -> Result<Sigma2Report> {
    if mc.members < 2 {
        return Err(CoreError::invalid(
            "variance routes need at least two paths per particle",
        ));
    }
    let dt = mc.config.dt;
    grid_steps(1.0, dt, "unit time")?;

    // Product route: no simulation, just weighted means per cell.
    let mut cell_means = Vec::with_capacity(path.grid_len());
    let mut cell_ses = Vec::with_capacity(path.grid_len());
    for idx in 0..path.grid_len() {
        let h = path.grid_point(idx);
        let measure = path.measure(idx);
        let vals: Vec<f64> = measure
            .particles()
            .iter()
            .map(|w| phi_tilde(w, &h) * chi(w, &h))
            .collect();
        let (m, se) = weighted_mean_se(&vals, measure.weights());
        cell_means.push(m);
        cell_ses.push(se);
    }
    let grid = path.grid_len() as f64;
    let product_value = 2.0 * mean(&cell_means);
    let product_se = 2.0 * pairwise_sum(&cell_ses.iter().map(|s| s * s).collect::<Vec<_>>()).sqrt()
        / grid;

    // Second-moment route: per particle, Monte Carlo the squared one-unit
    // martingale increment, then average per cell and over the grid.
    let flat: Vec<(usize, usize)> = (0..path.grid_len())
        .flat_map(|g| (0..path.measure(g).len()).map(move |p| (g, p)))
        .collect();
    let offsets: Vec<u64> = {
        let mut acc = 0u64;
        flat.iter()
            .map(|_| {
                let here = acc;
                acc += mc.members as u64;
                here
            })
            .collect()
    };
    let per_particle: Vec<Result<(f64, f64)>> = par_map_indexed(flat.len(), |i| {
        let (g, pidx) = flat[i];
        let h0 = path.grid_point(g);
        let w0 = &path.measure(g).particles()[pidx];
        let mut stepper = Stepper::new(mc.config.clone(), mc.force.clone(), mc.noise.clone())?;
        let mut sq = Vec::with_capacity(mc.members);
        for m in 0..mc.members {
            let wiener = WienerPath::new(mc.noise.seed, mc.id_base + offsets[i] + m as u64);
            let mut prev = 0.0;
            let mut cum = 0.0;
            let mut endpoint = 0.0;
            simulate_observed(&mut stepper, 0.0, 1.0, &h0, w0, &wiener, |j, _, hj, wj, _| {
                let v = phi_tilde(wj, hj);
                if j > 0 {
                    cum += 0.5 * dt * (prev + v);
                }
                prev = v;
                endpoint = chi(wj, hj);
            })?;
            let m1 = endpoint - chi(w0, &h0) + cum;
            sq.push(m1 * m1);
        }
        Ok(mean_with_se(&sq))
    });
    let per_particle: Vec<(f64, f64)> = per_particle.into_iter().collect::<Result<_>>()?;
    let mut y_cell_means = Vec::with_capacity(path.grid_len());
    let mut y_cell_ses = Vec::with_capacity(path.grid_len());
    let mut cursor = 0usize;
    for g in 0..path.grid_len() {
        let measure = path.measure(g);
        let count = measure.len();
        let rows = &per_particle[cursor..cursor + count];
        cursor += count;
        let weights = measure.weights();
        let values: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let (fg, spread_se) = weighted_mean_se(&values, weights);
        let path_var: Vec<f64> = rows
            .iter()
            .zip(weights)
            .map(|(r, w)| (w * r.1) * (w * r.1))
            .collect();
        y_cell_means.push(fg);
        y_cell_ses.push((spread_se * spread_se + pairwise_sum(&path_var)).sqrt());
    }
    let y_value = mean(&y_cell_means);
    let y_se =
        pairwise_sum(&y_cell_ses.iter().map(|s| s * s).collect::<Vec<_>>()).sqrt() / grid;
    let gap = (product_value - y_value).abs();
    let consistent = gap <= 3.0 * (product_se * product_se + y_se * y_se).sqrt();
    Ok(Sigma2Report {
        product_route: VarianceEstimate {
            value: product_value,
            se: product_se,
        },
        y_route: VarianceEstimate {
            value: y_value,
            se: y_se,
        },
        y_cell_means,
        consistent,
    })
}

/// Weighted mean of values with a spread-based standard error; weights must
/// be normalized.
fn weighted_mean_se(values: &[f64], weights: &[f64]) -> (f64, f64) {
    let terms: Vec<f64> = values.iter().zip(weights).map(|(v, w)| v * w).collect();
    let m = pairwise_sum(&terms);
    let dev: Vec<f64> = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * w * (v - m) * (v - m))
        .collect();
    (m, pairwise_sum(&dev).sqrt())
}

/// Birkhoff averages of a scalar function along the irrational rotation,
/// with the error against the space mean fitted to a power law.
#[derive(Debug, Clone, Serialize)]
pub struct BirkhoffReport {
    pub lengths: Vec<u64>,
    pub errors: Vec<f64>,
    /// Absent when censoring leaves too few points (constant functions).
    pub fit: Option<RateFit>,
}

pub fn birkhoff_rate(
    f: impl Fn(&TorusPoint) -> f64,
    f_mean: f64,
    alpha: &Frequency,
    h0: &TorusPoint,
    lengths: &[u64],
    floor: f64,
) -> Result<BirkhoffReport> {
    if lengths.is_empty() || lengths[0] == 0 {
        return Err(CoreError::invalid("average lengths must be positive"));
    }
    if lengths.windows(2).any(|p| p[1] <= p[0]) {
        return Err(CoreError::invalid("average lengths must be increasing"));
    }
    let max_n = lengths[lengths.len() - 1];
    let mut errors = Vec::with_capacity(lengths.len());
    let mut cursor = 0usize;
    let mut sum = 0.0;
    for k in 0..max_n {
        sum += f(&rotate(h0, alpha, k as f64));
        let count = k + 1;
        if cursor < lengths.len() && count == lengths[cursor] {
            errors.push((sum / count as f64 - f_mean).abs());
            cursor += 1;
        }
    }
    let xs: Vec<f64> = lengths.iter().map(|&n| n as f64).collect();
    let fit = power_fit(&xs, &errors, floor).ok();
    Ok(BirkhoffReport {
        lengths: lengths.to_vec(),
        errors,
        fit,
    })
}

/// Both sides of the even-power rearrangement identity for a finite sum.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MultinomialCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// Absolute gap over the accumulated magnitude of all terms (floored at
    /// one), so near-total cancellation does not masquerade as error.
    pub residual: f64,
}

/// Evaluate `(x_1 + .. + x_m)^{2p}` directly and as the double sum over
/// weighted prefix powers, reporting the scaled residual. The rearrangement
/// writes the power as
/// `sum_i sum_{j >= i} f(i, j) x_i x_j` where `f` is a weighted sum of
/// products of prefix-sum powers, with weight `k + 1` on the diagonal and a
/// flat factor `2p` off it.
pub fn multinomial_identity(xs: &[f64], p: u32) -> Result<MultinomialCheck> {
    if !(1..=6).contains(&p) {
        return Err(CoreError::invalid("power must lie in 1..=6"));
    }
    if xs.is_empty() || xs.len() > 64 {
        return Err(CoreError::invalid("term count must lie in 1..=64"));
    }
    let m = xs.len();
    // Prefix sums with a leading zero.
    let mut s = vec![0.0; m + 1];
    for (i, &x) in xs.iter().enumerate() {
        s[i + 1] = s[i] + x;
    }
    let lhs = s[m].powi(2 * p as i32);
    let degree = 2 * p as i32 - 2;
    let mut rhs = 0.0;
    let mut scale = lhs.abs();
    for i in 1..=m {
        let a = s[i - 1];
        let b = s[i];
        let mut diag = 0.0;
        let mut diag_abs = 0.0;
        let mut flat = 0.0;
        let mut flat_abs = 0.0;
        for k in 0..=degree {
            let term = a.powi(k) * b.powi(degree - k);
            diag += (k + 1) as f64 * term;
            diag_abs += (k + 1) as f64 * term.abs();
            flat += term;
            flat_abs += term.abs();
        }
        let x = xs[i - 1];
        let tail = s[m] - s[i];
        let off_factor = 2.0 * p as f64;
        rhs += diag * x * x + off_factor * flat * x * tail;
        scale += diag_abs * x * x + off_factor * flat_abs * (x * tail).abs();
    }
    let diff = (lhs - rhs).abs();
    let residual = if diff == 0.0 { 0.0 } else { diff / scale.max(1.0) };
    Ok(MultinomialCheck {
        lhs,
        rhs,
        residual,
    })
}

/// The two sides of the exponent-interpolation inequality used to trade a
/// growing factor against a decaying one.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HolderBoundCheck {
    pub t_choice: f64,
    pub gamma_bar: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// Check `exp(l1 T) d^g + exp(-l2 T) <= 2 D^g d^{gbar}` at the balancing
/// time `T = -g ln(d) / (l1 + l2)` (zero once `d >= 1`), where
/// `gbar = l2 g / (l1 + l2)`.
pub fn holder_exponent_bound(
    d_cap: f64,
    lambda1: f64,
    lambda2: f64,
    gamma: f64,
    delta: f64,
) -> Result<HolderBoundCheck> {
    if !(d_cap >= 1.0) || !(lambda1 > 0.0) || !(lambda2 > 0.0) {
        return Err(CoreError::invalid(
            "need cap >= 1 and positive trade-off rates",
        ));
    }
    if !(gamma > 0.0 && gamma <= 1.0) || !(delta > 0.0 && delta <= d_cap) {
        return Err(CoreError::invalid(
            "need exponent in (0, 1] and 0 < delta <= cap",
        ));
    }
    let t_choice = if delta >= 1.0 {
        0.0
    } else {
        -gamma * delta.ln() / (lambda1 + lambda2)
    };
    let gamma_bar = lambda2 * gamma / (lambda1 + lambda2);
    let lhs = (lambda1 * t_choice).exp() * delta.powf(gamma) + (-lambda2 * t_choice).exp();
    let rhs = 2.0 * d_cap.powf(gamma) * delta.powf(gamma_bar);
    Ok(HolderBoundCheck {
        t_choice,
        gamma_bar,
        lhs,
        rhs,
        pass: lhs <= rhs * (1.0 + 1e-12),
    })
}

/// Parameters of the exponential moment bounds: growth parameter, the
/// multiplier carried into weighted-observable checks, and the two free
/// constants of the drift balance.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LyapunovConfig {
    pub eta: f64,
    pub kappa: f64,
    pub a: f64,
    pub c: f64,
}

impl LyapunovConfig {
    pub fn new(eta: f64, kappa: f64, a: f64, c: f64) -> Result<Self> {
        if !(eta > 0.0) || !(kappa > 0.0) {
            return Err(CoreError::invalid("growth parameters must be positive"));
        }
        if !(a > 0.0 && a < 1.0) || !(c > 1.0) {
            return Err(CoreError::invalid(
                "balance constants need a in (0, 1) and c > 1",
            ));
        }
        Ok(LyapunovConfig { eta, kappa, a, c })
    }

    /// Largest admissible growth parameter `(1 - a) nu / (2 c B0)` for the
    /// given dissipation and noise input; infinite when the noise is off.
    pub fn eta_max(&self, nu: f64, b0: f64) -> f64 {
        if b0 == 0.0 {
            f64::INFINITY
        } else {
            (1.0 - self.a) * nu / (2.0 * self.c * b0)
        }
    }

    /// Drift constant `|f|_inf^2 / (a nu) + B0` of the energy balance.
    pub fn drift_constant(&self, f_sup: f64, nu: f64, b0: f64) -> f64 {
        f_sup * f_sup / (self.a * nu) + b0
    }

    /// The factor `exp(eta_max * drift / nu)` shared by the moment bounds,
    /// with the convention that a zero drift constant yields one even when
    /// the admissible growth parameter is unbounded.
    fn shared_exponent(&self, f_sup: f64, nu: f64, b0: f64) -> f64 {
        let drift = self.drift_constant(f_sup, nu, b0);
        if drift == 0.0 {
            1.0
        } else {
            (self.eta_max(nu, b0) * drift / nu).exp()
        }
    }
}

/// One grid time of the exponential moment check.
#[derive(Debug, Clone, Serialize)]
pub struct LyapunovRow {
    pub t: f64,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    /// Effective sample size of the exponential average.
    pub ess: f64,
    pub pass: bool,
}

/// Monte Carlo check of the exponential moment bound and the pathwise
/// energy-plus-dissipation bound.
#[derive(Debug, Clone, Serialize)]
pub struct LyapunovReport {
    pub rows: Vec<LyapunovRow>,
    /// Mean of the exponential of the running supremum of
    /// `|w|^2 + nu int |w|_1^2 - drift * t`, scaled by the growth
    /// parameter.
    pub supremum_lhs: f64,
    pub supremum_lhs_se: f64,
    pub supremum_rhs: f64,
    pub supremum_pass: bool,
    pub pass: bool,
}

/// Verify `E exp(eta |w_t|^2) <= C exp(eta e^{-nu t} |w_0|^2)` on a time
/// grid, with `C = 4 / (1 - 2^{1-c}) * exp(eta_max * drift / nu)`, and the
/// running-supremum variant with the squared prefactor. An effective sample
/// size below fifty aborts: the exponential average is then dominated by a
/// few members and the estimate is meaningless.
#[allow(clippy::too_many_arguments)]
pub fn lyapunov_check(
    lconfig: &LyapunovConfig,
    config: &SimConfig,
    force: &QuasiPeriodicForce,
    noise: &NoiseConfig,
    w0: &SpectralVorticity,
    h_start: &TorusPoint,
    times: &[f64],
    members: usize,
    id_base: u64,
) -> Result<LyapunovReport> {
    let nu = config.nu;
    let b0 = noise.energy_input();
    let f_sup = force.sup_norm_bound();
    if lconfig.eta > lconfig.eta_max(nu, b0) {
        return Err(CoreError::invalid(
            "growth parameter exceeds the admissible maximum",
        ));
    }
    if times.is_empty() || members < 2 {
        return Err(CoreError::invalid(
            "moment check needs grid times and at least two members",
        ));
    }
    let dt = config.dt;
    let mut t_steps = Vec::with_capacity(times.len());
    for &t in times {
        let j = grid_steps(t, dt, "grid time")?;
        if j < 0 || t_steps.last().is_some_and(|&l| j <= l) {
            return Err(CoreError::invalid("grid times must be increasing"));
        }
        t_steps.push(j);
    }
    let end = *t_steps.last().expect("nonempty grid") as f64 * dt;
    let eta = lconfig.eta;
    let drift = lconfig.drift_constant(f_sup, nu, b0);

    let rows: Vec<Result<(Vec<f64>, f64)>> = par_map_indexed(members, |m| {
        let mut stepper = Stepper::new(config.clone(), force.clone(), noise.clone())?;
        let wiener = WienerPath::new(noise.seed, id_base + m as u64);
        let mut at_grid = vec![0.0; t_steps.len()];
        let mut cursor = 0usize;
        let mut sup_q = f64::NEG_INFINITY;
        simulate_observed(
            &mut stepper,
            0.0,
            end,
            h_start,
            w0,
            &wiener,
            |j, tj, _, w, enstrophy| {
                let nsq = w.norm_sq();
                sup_q = sup_q.max(nsq + nu * enstrophy - drift * tj);
                if cursor < t_steps.len() && j == t_steps[cursor] {
                    at_grid[cursor] = (eta * nsq).exp();
                    cursor += 1;
                }
            },
        )?;
        Ok((at_grid, (eta * sup_q).exp()))
    });
    let rows: Vec<(Vec<f64>, f64)> = rows.into_iter().collect::<Result<_>>()?;

    let denom = 1.0 - (1.0 - lconfig.c).exp2();
    let shared = lconfig.shared_exponent(f_sup, nu, b0);
    let single_prefactor = 4.0 / denom * shared;
    let sup_prefactor = 16.0 / (denom * denom) * shared;
    let w0_sq = w0.norm_sq();

    let mut out_rows = Vec::with_capacity(times.len());
    let mut pass = true;
    for (i, &t) in times.iter().enumerate() {
        let vals: Vec<f64> = rows.iter().map(|r| r.0[i]).collect();
        let ess = effective_sample_size(&vals);
        if ess < 50.0 {
            return Err(CoreError::EstimatorUnstable {
                detail: format!(
                    "effective sample size {ess:.1} of {members} at t = {t}; grow the ensemble or shrink eta"
                ),
            });
        }
        let (lhs, lhs_se) = mean_with_se(&vals);
        let rhs = single_prefactor * (eta * (-nu * t).exp() * w0_sq).exp();
        let row_pass = lhs <= rhs + 3.0 * lhs_se;
        pass &= row_pass;
        out_rows.push(LyapunovRow {
            t,
            lhs,
            lhs_se,
            rhs,
            ess,
            pass: row_pass,
        });
    }
    let sups: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let sup_ess = effective_sample_size(&sups);
    if sup_ess < 50.0 {
        return Err(CoreError::EstimatorUnstable {
            detail: format!(
                "effective sample size {sup_ess:.1} of {members} on the running supremum; grow the ensemble or shrink eta"
            ),
        });
    }
    let (supremum_lhs, supremum_lhs_se) = mean_with_se(&sups);
    let supremum_rhs = sup_prefactor * (eta * w0_sq).exp();
    let supremum_pass = supremum_lhs <= supremum_rhs + 3.0 * supremum_lhs_se;
    Ok(LyapunovReport {
        rows: out_rows,
        supremum_lhs,
        supremum_lhs_se,
        supremum_rhs,
        supremum_pass,
        pass: pass && supremum_pass,
    })
}

/// `(sum v)^2 / sum v^2` for nonnegative values: the number of members
/// effectively contributing to an exponential average.
fn effective_sample_size(values: &[f64]) -> f64 {
    let total = pairwise_sum(values);
    let sq: Vec<f64> = values.iter().map(|v| v * v).collect();
    let total_sq = pairwise_sum(&sq);
    if total_sq == 0.0 {
        values.len() as f64
    } else {
        total * total / total_sq
    }
}

/// Which coupling distance the continuity check measures.
pub enum ContinuityPair {
    /// Same initial field driven along two symbol angles.
    Symbol {
        w0: SpectralVorticity,
        h1: TorusPoint,
        h2: TorusPoint,
    },
    /// Two initial fields sharing the symbol angle.
    Initial {
        w1: SpectralVorticity,
        w2: SpectralVorticity,
        h: TorusPoint,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuityRow {
    pub t: f64,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuityReport {
    pub rows: Vec<ContinuityRow>,
    /// Growth rate `64 c0^6 eta^-3 nu^-5 + eta * drift` of the coupling
    /// bound.
    pub rate: f64,
    pub pass: bool,
}

/// Monte Carlo check of the mean-square coupling bounds: pairs share the
/// noise path, and the squared distance at each grid time is compared with
/// the closed-form envelope. The advection constant enters as a lower
/// estimate, which shrinks the envelope and therefore never hides a
/// violation.
#[allow(clippy::too_many_arguments)]
pub fn continuity_checks(
    lconfig: &LyapunovConfig,
    config: &SimConfig,
    force: &QuasiPeriodicForce,
    noise: &NoiseConfig,
    pair: &ContinuityPair,
    c0: f64,
    times: &[f64],
    members: usize,
    id_base: u64,
) -> Result<ContinuityReport> {
    let nu = config.nu;
    let b0 = noise.energy_input();
    let f_sup = force.sup_norm_bound();
    if lconfig.eta > lconfig.eta_max(nu, b0) {
        return Err(CoreError::invalid(
            "growth parameter exceeds the admissible maximum",
        ));
    }
    if !(c0 > 0.0) || times.is_empty() || members < 2 {
        return Err(CoreError::invalid(
            "continuity check needs c0 > 0, grid times, and two members",
        ));
    }
    let eta = lconfig.eta;
    let drift = lconfig.drift_constant(f_sup, nu, b0);
    let rate = 64.0 * c0.powi(6) * eta.powi(-3) * nu.powi(-5) + eta * drift;
    let denom = 1.0 - (1.0 - lconfig.c).exp2();
    let shared = lconfig.shared_exponent(f_sup, nu, b0);

    let per_member: Vec<Result<Vec<f64>>> = par_map_indexed(members, |m| {
        let mut stepper = Stepper::new(config.clone(), force.clone(), noise.clone())?;
        let wiener = WienerPath::new(noise.seed, id_base + m as u64);
        let (wa, ha, wb, hb) = match pair {
            ContinuityPair::Symbol { w0, h1, h2 } => (w0, h1, w0, h2),
            ContinuityPair::Initial { w1, w2, h } => (w1, h, w2, h),
        };
        let xa = run_sampled(&mut stepper, 0.0, times, ha, wa, &wiener)?;
        let xb = run_sampled(&mut stepper, 0.0, times, hb, wb, &wiener)?;
        Ok(xa
            .iter()
            .zip(&xb)
            .map(|(a, b)| a.sub(b).norm_sq())
            .collect())
    });
    let per_member: Vec<Vec<f64>> = per_member.into_iter().collect::<Result<_>>()?;

    // Closed-form envelope at time t, up to the shared exp(rate * t).
    let base = match pair {
        ContinuityPair::Symbol { w0, h1, h2 } => {
            let gap_sq = symbol_gap_sq(config, force, h1, h2);
            let prefactor = 16.0 / (rate * nu) / (denom * denom) * shared;
            prefactor * (eta * w0.norm_sq()).exp() * gap_sq
        }
        ContinuityPair::Initial { w1, w2, h: _ } => {
            let prefactor = 64.0 * denom.powf(-1.5) * shared;
            prefactor * w1.sub(w2).norm_sq() * (eta * w1.norm_sq()).exp()
        }
    };

    let mut rows = Vec::with_capacity(times.len());
    let mut pass = true;
    for (i, &t) in times.iter().enumerate() {
        let vals: Vec<f64> = per_member.iter().map(|r| r[i]).collect();
        let (lhs, lhs_se) = mean_with_se(&vals);
        // A vanishing base means a zero envelope at every time; skip the
        // multiplication so an overflowing exponential cannot turn it NaN.
        let rhs = if base == 0.0 {
            0.0
        } else {
            base * (rate * t).exp()
        };
        let row_pass = lhs <= rhs + 3.0 * lhs_se;
        pass &= row_pass;
        rows.push(ContinuityRow {
            t,
            lhs,
            lhs_se,
            rhs,
            pass: row_pass,
        });
    }
    Ok(ContinuityReport { rows, rate, pass })
}

/// Sampled supremum over the rotation orbit of the squared force gap
/// between two symbol angles. A sampled supremum underestimates, which
/// shrinks the envelope: the conservative direction for a verifier.
fn symbol_gap_sq(
    config: &SimConfig,
    force: &QuasiPeriodicForce,
    h1: &TorusPoint,
    h2: &TorusPoint,
) -> f64 {
    let mut sup: f64 = 0.0;
    for i in 0..2048 {
        let t = i as f64 * 0.177;
        let a = force.eval(&config.lattice, &rotate(h1, &force.frequency, t));
        let b = force.eval(&config.lattice, &rotate(h2, &force.frequency, t));
        sup = sup.max(a.sub(&b).norm_sq());
    }
    sup
}

/// Forward time-average of an observable against the torus-averaged measure
/// mean.
#[derive(Debug, Clone, Serialize)]
pub struct ForwardAverageReport {
    pub forward_mean: f64,
    pub forward_se: f64,
    pub reference_mean: f64,
    pub reference_se: f64,
    pub gap: f64,
    pub overlap: bool,
}

/// Average the observable over trajectory states at times `0, K, ..,
/// (count-1) K` and an ensemble, and compare with the grid average of the
/// measure-path means; the two must agree within three combined standard
/// errors.
#[allow(clippy::too_many_arguments)]
pub fn forward_average_check(
    config: &SimConfig,
    force: &QuasiPeriodicForce,
    noise: &NoiseConfig,
    w0: &SpectralVorticity,
    h_start: &TorusPoint,
    k_step: f64,
    count: usize,
    members: usize,
    id_base: u64,
    phi: &Observable,
    path: &MeasurePath,
) -> Result<ForwardAverageReport> {
    if !(k_step >= 1.0) || count == 0 || members < 2 {
        return Err(CoreError::invalid(
            "forward average needs spacing >= 1, sample times, and two members",
        ));
    }
    grid_steps(k_step, config.dt, "sample spacing")?;
    let times: Vec<f64> = (0..count).map(|j| j as f64 * k_step).collect();
    let starts = vec![w0.clone(); members];
    let by_time =
        evolve_ensemble_sampled(config, force, noise, 0.0, &times, h_start, &starts, id_base)?;
    let mut member_avgs = vec![0.0; members];
    for states in &by_time {
        for (m, w) in states.iter().enumerate() {
            member_avgs[m] += phi.eval(w) / count as f64;
        }
    }
    let (forward_mean, forward_se) = mean_with_se(&member_avgs);
    let cell_means = path.grid_values(phi);
    let (reference_mean, reference_se) = mean_with_se(&cell_means);
    let gap = (forward_mean - reference_mean).abs();
    let overlap = gap <= 3.0 * (forward_se * forward_se + reference_se * reference_se).sqrt();
    Ok(ForwardAverageReport {
        forward_mean,
        forward_se,
        reference_mean,
        reference_se,
        gap,
        overlap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forcing::ForceTerm;
    use crate::integrator::simulate;
    use crate::rng::{stream_rng, tags};
    use crate::spectral::ModeLattice;
    use std::sync::Arc;

    fn linear_setup(n: u32, nu: f64) -> (SimConfig, QuasiPeriodicForce) {
        let lattice = ModeLattice::new(n);
        let config = SimConfig::new(nu, 0.05, lattice, false).unwrap();
        let force = QuasiPeriodicForce::zero(Frequency::golden_mean());
        (config, force)
    }

    /// One-harmonic quasi-periodic force rotating between two fixed fields.
    fn cos_force(lattice: &Arc<ModeLattice>, amp: f64) -> QuasiPeriodicForce {
        let term = ForceTerm {
            m: vec![1],
            cos_amplitude: SpectralVorticity::harmonic_cos(lattice, [0, 1], amp),
            sin_amplitude: SpectralVorticity::harmonic_sin(lattice, [0, 1], amp),
        };
        QuasiPeriodicForce::new(Frequency::golden_mean(), vec![term], 1.0).unwrap()
    }

    const SEED: u64 = 2026;

    /// Stationary variance of each driven coefficient component in the
    /// linear configuration at unit viscosity and amplitude.
    fn ou_component_variance(k_sq: f64, t: f64) -> f64 {
        0.25 / (2.0 * k_sq) * (1.0 - (-2.0 * k_sq * t).exp())
    }

    #[test]
    fn observable_envelopes_hold_and_saturate() {
        let lattice = ModeLattice::new(3);
        let eta = 0.02;
        let catalog = vec![
            Observable::energy(eta).unwrap(),
            Observable::mode_re([1, 0], eta).unwrap(),
            Observable::mode_im([2, 1], eta).unwrap(),
            Observable::tanh_mode([1, 1], 0.3, eta).unwrap(),
            Observable::exp_weighted(0.015, eta).unwrap(),
        ];
        let mut rng = stream_rng(SEED, tags::SCENARIO, 0, 0);
        for trial in 0..200 {
            let mut w = SpectralVorticity::random_gaussian(&lattice, &mut rng, 0.3);
            // Sweep norms across the envelope's maximizer region.
            let target = 0.2 + (trial as f64) * 0.05 / eta.sqrt();
            let norm = w.norm();
            if norm > 0.0 {
                w.scale(target.sqrt() / norm);
            }
            for phi in &catalog {
                assert!(
                    phi.eval(&w).abs() <= phi.envelope(&w) * (1.0 + 1e-12),
                    "envelope violated by {:?}",
                    phi.kind
                );
            }
        }
        // The energy envelope is tight at norm^2 = 1/eta.
        let mut w = SpectralVorticity::harmonic_cos(&lattice, [1, 0], 1.0);
        w.scale((1.0 / eta).sqrt() / w.norm());
        let energy = &catalog[0];
        assert!((energy.eval(&w) - energy.envelope(&w)).abs() <= 1e-12 * energy.envelope(&w));
        // The coefficient envelope is tight on a single harmonic at
        // norm = 1/sqrt(2 eta).
        let mut w = SpectralVorticity::harmonic_cos(&lattice, [1, 0], 1.0);
        w.scale((1.0 / (2.0 * eta)).sqrt() / w.norm());
        let mode = &catalog[1];
        assert!((mode.eval(&w).abs() - mode.envelope(&w)).abs() <= 1e-12 * mode.envelope(&w));
        // Catalog constructors reject out-of-domain parameters.
        assert!(Observable::energy(0.0).is_err());
        assert!(Observable::mode_re([0, 0], 0.1).is_err());
        assert!(Observable::tanh_mode([1, 0], 0.0, 0.1).is_err());
        assert!(Observable::exp_weighted(0.2, 0.1).is_err());
    }

    #[test]
    fn measure_path_grid_lookup_is_nearest_and_periodic() {
        let lattice = ModeLattice::new(2);
        let grid = 5usize;
        let measures: Vec<EmpiricalMeasure> = (0..grid)
            .map(|i| {
                EmpiricalMeasure::dirac(SpectralVorticity::harmonic_cos(
                    &lattice,
                    [1, 0],
                    i as f64 + 1.0,
                ))
            })
            .collect();
        let path = MeasurePath::from_measures(1, grid, measures).unwrap();
        let phi = Observable::mode_re([1, 0], 0.1).unwrap();
        let mut rng = stream_rng(SEED, tags::SCENARIO, 1, 0);
        use rand::Rng;
        for _ in 0..100 {
            let h = TorusPoint::new(vec![rng.gen::<f64>() * TAU]);
            let direct = path.nearest_index(&h);
            let brute = (0..grid)
                .min_by(|&a, &b| {
                    path.grid_point(a)
                        .distance(&h)
                        .partial_cmp(&path.grid_point(b).distance(&h))
                        .unwrap()
                })
                .unwrap();
            let da = path.grid_point(direct).distance(&h);
            let db = path.grid_point(brute).distance(&h);
            assert!(da <= db + 1e-12);
            // Shifting by a full turn cannot change the lookup.
            let shifted = TorusPoint::new(vec![h.components()[0] + TAU]);
            assert_eq!(path.nearest_index(&h), path.nearest_index(&shifted));
        }
        // Cell means are read back exactly on the grid points.
        for i in 0..grid {
            let h = path.grid_point(i);
            assert_eq!(path.mean_at(&h, &phi), (i as f64 + 1.0) / 2.0);
        }
        // Construction rejects a wrong cell count.
        assert!(MeasurePath::from_measures(
            2,
            3,
            vec![EmpiricalMeasure::dirac(SpectralVorticity::zeros(&lattice)); 8]
        )
        .is_err());
    }

    #[test]
    fn centering_kills_constants_and_is_exact_on_own_particles() {
        let (config, force) = linear_setup(2, 1.0);
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        let path =
            estimate_measure_path(&config, &force, &noise, 4, 6.0, 64, 9_000).unwrap();
        // A constant observable centers to zero up to the weight
        // normalization slack.
        let constant = Observable::exp_weighted(0.0, 0.001).unwrap();
        let centered = center(constant, &path);
        let w_probe = SpectralVorticity::harmonic_cos(&config.lattice, [1, 1], 0.7);
        for i in 0..path.grid_len() {
            let h = path.grid_point(i);
            assert!(centered.eval(&w_probe, &h).abs() <= 1e-12);
        }
        // Self-centering: the centered observable averages to zero exactly
        // on the cell's own particles.
        let phi = Observable::mode_re([1, 0], 0.001).unwrap();
        let centered = center(phi.clone(), &path);
        for i in 0..path.grid_len() {
            let h = path.grid_point(i);
            let residual = path.measure(i).expect(|w| centered.eval(w, &h));
            assert!(residual.abs() <= 1e-12, "residual {residual}");
        }
        // The subtracted means are near zero: the linear stationary law has
        // mean zero, so centering is a small correction of order the
        // particle error.
        let sigma = ou_component_variance(1.0, f64::INFINITY).sqrt();
        for i in 0..path.grid_len() {
            let h = path.grid_point(i);
            let se = sigma / (path.measure(i).len() as f64).sqrt();
            assert!(
                path.mean_at(&h, &phi).abs() <= 4.0 * se,
                "cell {i} mean {} exceeds 4 se {}",
                path.mean_at(&h, &phi),
                se
            );
        }
    }

    #[test]
    fn corrector_matches_the_closed_form_in_the_linear_configuration() {
        let (config, force) = linear_setup(2, 1.0);
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        // Start with coefficient real part 0.6 at the driven mode; the
        // expected trajectory decays at unit rate, so the corrector at the
        // start equals 0.6.
        let w = SpectralVorticity::harmonic_cos(&config.lattice, [1, 0], 1.2);
        let h = TorusPoint::origin(1);
        let phi = Observable::mode_re([1, 0], 0.01).unwrap();
        let phi_tilde = |wj: &SpectralVorticity, _: &TorusPoint| phi.eval(wj);
        let est = estimate_corrector(
            &config, &force, &noise, &w, &h, 12.0, 400, 11_000, &phi_tilde, None, 1e-3,
        )
        .unwrap();
        assert!(
            (est.value - 0.6).abs() <= 3.0 * est.se,
            "corrector {} +- {} misses 0.6",
            est.value,
            est.se
        );
        // The integral's variance grows linearly in the horizon, about 2.6
        // at this one, so the error bar sits near 0.08.
        assert!(est.se < 0.12);
        // No decay fit supplied: the tail is unknown and flagged.
        assert!(est.tail_bound.is_infinite() && !est.tail_ok);

        // A supplied decay fit turns into the closed-form tail bound.
        let fit = RateFit {
            exponent: -1.0,
            exponent_se: 0.01,
            prefactor: 0.6,
            r_squared: 0.999,
            censored: 0,
            used: 10,
        };
        let est = estimate_corrector(
            &config, &force, &noise, &w, &h, 12.0, 16, 11_600, &phi_tilde, Some(&fit), 1e-3,
        )
        .unwrap();
        assert!((est.tail_bound - 0.6 * (-12.0f64).exp()).abs() < 1e-12);
        assert!(est.tail_ok);

        // The zero integrand has a zero corrector with zero spread.
        let zero = |_: &SpectralVorticity, _: &TorusPoint| 0.0;
        let est = estimate_corrector(
            &config, &force, &noise, &w, &h, 4.0, 8, 12_000, &zero, None, 1.0,
        )
        .unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.se, 0.0);
    }

    #[test]
    fn corrector_averages_to_zero_over_the_estimated_measure() {
        let (config, force) = linear_setup(2, 1.0);
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        let path =
            estimate_measure_path(&config, &force, &noise, 1, 8.0, 48, 20_000).unwrap();
        let phi = Observable::mode_re([1, 0], 0.01).unwrap();
        let phi_tilde = |w: &SpectralVorticity, _: &TorusPoint| phi.eval(w);
        let h = path.grid_point(0);
        let measure = path.measure(0);
        let mut values = Vec::new();
        let mut ses = Vec::new();
        for (pidx, w) in measure.particles().iter().enumerate() {
            let est = estimate_corrector(
                &config,
                &force,
                &noise,
                w,
                &h,
                10.0,
                64,
                40_000 + (pidx as u64) * 64,
                &phi_tilde,
                None,
                1.0,
            )
            .unwrap();
            values.push(est.value);
            ses.push(est.se);
        }
        let (avg, spread_se) = mean_with_se(&values);
        let path_se =
            pairwise_sum(&ses.iter().map(|s| s * s).collect::<Vec<_>>()).sqrt() / ses.len() as f64;
        let combined = (spread_se * spread_se + path_se * path_se).sqrt();
        assert!(
            avg.abs() <= 3.5 * combined,
            "measure-averaged corrector {avg} exceeds 3.5 x {combined}"
        );
    }

    #[test]
    fn martingale_decomposition_bookkeeping_is_exact() {
        let lattice = ModeLattice::new(2);
        let config = SimConfig::new(1.0, 0.05, lattice, true).unwrap();
        let force = QuasiPeriodicForce::zero(Frequency::golden_mean());
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        let mut stepper = Stepper::new(config.clone(), force, noise.clone()).unwrap();
        let w0 = SpectralVorticity::harmonic_cos(&config.lattice, [1, 0], 0.5);
        let path = WienerPath::new(noise.seed, 77);
        // A non-integer end time exercises the boundary remainder.
        let traj = simulate(
            &mut stepper,
            0.0,
            6.55,
            &TorusPoint::origin(1),
            &w0,
            &path,
            1,
        )
        .unwrap();
        let phi_tilde =
            |w: &SpectralVorticity, h: &TorusPoint| w.coeff([1, 0]).re + 0.1 * h.components()[0].sin();
        let chi = |w: &SpectralVorticity, h: &TorusPoint| {
            0.5 * w.coeff([1, 1]).im + 0.05 * h.components()[0].cos()
        };
        let d = martingale_decompose(&traj, phi_tilde, chi).unwrap();
        assert_eq!(d.m.len(), 7);
        assert_eq!(d.z.len(), 6);
        assert_eq!(d.m[0], 0.0);
        // The increments telescope back to the martingale.
        let mut acc = 0.0;
        for (j, z) in d.z.iter().enumerate() {
            acc += z;
            assert!((acc - d.m[j + 1]).abs() <= 1e-12);
        }
        // Martingale plus remainder reproduces the full integral.
        assert!((d.m[6] + d.remainder - d.integral_full).abs() <= 1e-12);

        // On an integer span the remainder is the corrector boundary term.
        let traj_int = simulate(
            &mut stepper,
            0.0,
            6.0,
            &TorusPoint::origin(1),
            &w0,
            &path,
            1,
        )
        .unwrap();
        let d_int = martingale_decompose(&traj_int, phi_tilde, chi).unwrap();
        assert!((d_int.remainder - (d_int.chi[0] - d_int.chi[6])).abs() <= 1e-12);

        // Zero integrand and corrector give the zero decomposition.
        let d0 = martingale_decompose(&traj, |_, _| 0.0, |_, _| 0.0).unwrap();
        assert!(d0.m.iter().all(|&x| x == 0.0));
        assert_eq!(d0.remainder, 0.0);

        // Sparse sampling and a step that does not divide one are refused.
        let sparse = simulate(
            &mut stepper,
            0.0,
            4.0,
            &TorusPoint::origin(1),
            &w0,
            &path,
            2,
        )
        .unwrap();
        assert!(martingale_decompose(&sparse, phi_tilde, chi).is_err());
        let lattice2 = ModeLattice::new(2);
        let config2 = SimConfig::new(1.0, 0.3, lattice2, false).unwrap();
        let force2 = QuasiPeriodicForce::zero(Frequency::golden_mean());
        let mut stepper2 = Stepper::new(config2, force2, noise).unwrap();
        let traj2 = simulate(
            &mut stepper2,
            0.0,
            3.0,
            &TorusPoint::origin(1),
            &SpectralVorticity::zeros(&ModeLattice::new(2)),
            &path,
            1,
        )
        .unwrap();
        assert!(martingale_decompose(&traj2, phi_tilde, chi).is_err());
    }

    #[test]
    fn martingale_property_holds_with_the_exact_corrector() {
        let (config, force) = linear_setup(2, 1.0);
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        let w0 = SpectralVorticity::harmonic_cos(&config.lattice, [1, 0], 1.0);
        let h0 = TorusPoint::origin(1);
        let phi_tilde = |w: &SpectralVorticity, _: &TorusPoint| w.coeff([1, 0]).re;
        // In the linear configuration the corrector for the driven
        // coefficient is the coefficient itself (unit decay rate).
        let chi = phi_tilde;
        let decomps: Vec<MartingaleDecomposition> = par_map_indexed(300, |m| {
            let mut stepper =
                Stepper::new(config.clone(), force.clone(), noise.clone()).unwrap();
            let path = WienerPath::new(noise.seed, 60_000 + m as u64);
            let traj = simulate(&mut stepper, 0.0, 8.0, &h0, &w0, &path, 1).unwrap();
            martingale_decompose(&traj, phi_tilde, chi).unwrap()
        });
        let report = test_martingale_property(&decomps).unwrap();
        assert!(report.pass, "martingale check failed: {report:?}");

        // Dropping the corrector on a mean-shifted integrand leaves a
        // drift: the same trajectories fail the check.
        let shifted = |w: &SpectralVorticity, _: &TorusPoint| w.norm_sq();
        let bad: Vec<MartingaleDecomposition> = par_map_indexed(300, |m| {
            let mut stepper =
                Stepper::new(config.clone(), force.clone(), noise.clone()).unwrap();
            let path = WienerPath::new(noise.seed, 60_000 + m as u64);
            let traj = simulate(&mut stepper, 0.0, 8.0, &h0, &w0, &path, 1).unwrap();
            martingale_decompose(&traj, shifted, |_, _| 0.0).unwrap()
        });
        let bad_report = test_martingale_property(&bad).unwrap();
        assert!(!bad_report.pass);
        assert!(!bad_report.drift_ok);
        // The drift grows with time: the last mean dwarfs the first.
        assert!(bad_report.mean_m[7] > 5.0 * bad_report.mean_m[0].max(1e-9));

        // A synthetic ensemble of independent mean-zero increments passes.
        let synthetic: Vec<MartingaleDecomposition> = (0..200)
            .map(|i| {
                let mut rng = stream_rng(SEED, tags::SCENARIO, 40 + i, 0);
                use rand_distr::{Distribution, StandardNormal};
                let z: Vec<f64> = (0..6)
                    .map(|_| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        x
                    })
                    .collect();
                let mut m = vec![0.0];
                for &zi in &z {
                    m.push(m.last().unwrap() + zi);
                }
                let phi_at_nodes: Vec<f64> = (0..7)
                    .map(|_| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        x
                    })
                    .collect();
                MartingaleDecomposition {
                    remainder: 0.0,
                    chi: vec![0.0; 7],
                    phi_at_nodes,
                    integral_full: *m.last().unwrap(),
                    m,
                    z,
                }
            })
            .collect();
        assert!(test_martingale_property(&synthetic).unwrap().pass);
        // Fewer than 100 trajectories are refused.
        assert!(test_martingale_property(&synthetic[..50]).is_err());
    }

    #[test]
    fn slln_rate_matches_the_linear_closed_form() {
        let (config, force) = linear_setup(2, 1.0);
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        let w0 = SpectralVorticity::zeros(&config.lattice);
        let h0 = TorusPoint::origin(1);
        let phi = Observable::mode_re([1, 0], 0.01).unwrap();
        let horizons = [8.0, 16.0, 32.0, 64.0, 128.0, 256.0];
        let report = slln_run(
            &config,
            &force,
            &noise,
            0.0,
            &horizons,
            &h0,
            &w0,
            256,
            70_000,
            &phi,
            &CenteringMode::None,
            0.0,
        )
        .unwrap();
        let fit = report.fit.as_ref().expect("fit available");
        assert!(
            fit.exponent > -0.6 && fit.exponent < -0.4,
            "slln exponent {} outside [-0.6, -0.4]",
            fit.exponent
        );
        assert!(fit.r_squared > 0.95);
        // The mean absolute average tracks the half-normal closed form
        // sqrt(2 sigma^2 / (pi T)) with sigma^2 = 1/4.
        for (i, &t) in horizons.iter().enumerate() {
            let predicted = (2.0 * 0.25 / (std::f64::consts::PI * t)).sqrt();
            assert!(
                (report.mean_abs[i] - predicted).abs()
                    <= 4.0 * report.mean_abs_se[i] + 0.15 * predicted,
                "at T = {t}: mean |A| = {} vs predicted {predicted}",
                report.mean_abs[i]
            );
        }
        // Too narrow a horizon grid is refused.
        assert!(slln_run(
            &config,
            &force,
            &noise,
            0.0,
            &[8.0, 16.0, 32.0],
            &h0,
            &w0,
            8,
            70_000,
            &phi,
            &CenteringMode::None,
            0.0,
        )
        .is_err());
    }

    #[test]
    fn leave_one_out_centering_matches_the_exact_rate() {
        let (config, force) = linear_setup(2, 1.0);
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        let w0 = SpectralVorticity::zeros(&config.lattice);
        let h0 = TorusPoint::origin(1);
        let phi = Observable::mode_re([1, 0], 0.01).unwrap();
        let horizons = [8.0, 16.0, 32.0, 64.0, 128.0, 256.0];
        let report = slln_run(
            &config,
            &force,
            &noise,
            0.0,
            &horizons,
            &h0,
            &w0,
            192,
            71_000,
            &phi,
            &CenteringMode::LeaveOneOut,
            0.0,
        )
        .unwrap();
        let fit = report.fit.as_ref().expect("fit available");
        assert!(
            fit.exponent > -0.6 && fit.exponent < -0.4,
            "leave-one-out exponent {}",
            fit.exponent
        );
        // Leave-one-out inflates the variance by members/(members - 1)
        // only; the averages stay close to the uncentered ones in law.
        assert!(report.mean_abs[0] > 0.0);
    }

    #[test]
    fn moment_rates_match_gaussian_scaling() {
        let (config, force) = linear_setup(2, 1.0);
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        let w0 = SpectralVorticity::zeros(&config.lattice);
        let h0 = TorusPoint::origin(1);
        let phi = Observable::mode_re([1, 0], 0.01).unwrap();
        // Long horizons: the zero start's variance deficit flattens the
        // fourth-moment slope below T = 16.
        let horizons = [16.0, 32.0, 64.0, 128.0, 256.0, 512.0];
        let report = slln_run(
            &config,
            &force,
            &noise,
            0.0,
            &horizons,
            &h0,
            &w0,
            512,
            72_000,
            &phi,
            &CenteringMode::None,
            0.0,
        )
        .unwrap();
        let durations: Vec<f64> = horizons.to_vec();
        let p1 = moment_rate_check(&durations, &report.samples, 1, 0.0).unwrap();
        assert!(p1.pass, "second-moment slope {}", p1.fit.exponent);
        assert!((p1.fit.exponent + 1.0).abs() < 0.25);
        let p2 = moment_rate_check(&durations, &report.samples, 2, 0.0).unwrap();
        assert!(p2.pass, "fourth-moment slope {}", p2.fit.exponent);
        assert!(p2.fit.exponent <= -1.85);
        // Unsupported orders are refused.
        assert!(moment_rate_check(&durations, &report.samples, 3, 0.0).is_err());
        // The zero observable censors every point and the fit is refused.
        let zeros = vec![vec![0.0; 32]; horizons.len()];
        assert!(matches!(
            moment_rate_check(&durations, &zeros, 1, 0.0),
            Err(CoreError::DegenerateFit { .. })
        ));
    }

    #[test]
    fn clt_matches_the_normal_law_in_the_linear_configuration() {
        let (config, force) = linear_setup(2, 1.0);
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        let w0 = SpectralVorticity::zeros(&config.lattice);
        let h0 = TorusPoint::origin(1);
        let phi = Observable::mode_re([1, 0], 0.01).unwrap();
        // Asymptotic variance 1/4 in closed form.
        let report = clt_run(
            &config,
            &force,
            &noise,
            0.0,
            &[20.0, 40.0, 80.0],
            &h0,
            &w0,
            2000,
            80_000,
            &phi,
            &CenteringMode::None,
            0.25,
        )
        .unwrap();
        assert!(!report.degenerate);
        assert!(
            report.ks_distance <= 0.05,
            "distance {} against the closed-form reference",
            report.ks_distance
        );
        assert!(
            (report.sigma_sq_sample - 0.25).abs()
                <= 3.0 * report.sigma_sq_sample_se + 0.02,
            "sample variance {} +- {}",
            report.sigma_sq_sample,
            report.sigma_sq_sample_se
        );
        // The distance curve is reported along the sweep.
        assert_eq!(report.sweep.len(), 3);
        // Small ensembles are refused.
        assert!(clt_run(
            &config,
            &force,
            &noise,
            0.0,
            &[20.0],
            &h0,
            &w0,
            100,
            80_000,
            &phi,
            &CenteringMode::None,
            0.25,
        )
        .is_err());
    }

    #[test]
    fn clt_degenerate_branch_uses_the_bounded_statistic() {
        let (config, force) = linear_setup(2, 1.0);
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        let w0 = SpectralVorticity::zeros(&config.lattice);
        let h0 = TorusPoint::origin(1);
        // A coefficient the noise never drives stays exactly zero from a
        // zero start, making the limit degenerate.
        let phi = Observable::mode_re([2, 0], 0.01).unwrap();
        let report = clt_run(
            &config,
            &force,
            &noise,
            0.0,
            &[10.0, 20.0],
            &h0,
            &w0,
            500,
            81_000,
            &phi,
            &CenteringMode::None,
            0.0,
        )
        .unwrap();
        assert!(report.degenerate);
        assert_eq!(report.sigma_sq_sample, 0.0);
        assert!(report.weighted_gap <= 1e-12);
        assert!(report.ks_distance <= 1e-12);
    }

    #[test]
    fn sigma2_routes_agree_with_the_closed_form() {
        let (config, force) = linear_setup(2, 1.0);
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        let w0 = SpectralVorticity::zeros(&config.lattice);
        let h0 = TorusPoint::origin(1);
        let phi = Observable::mode_re([1, 0], 0.01).unwrap();
        let direct = estimate_sigma2_direct(
            &config,
            &force,
            &noise,
            0.0,
            80.0,
            &h0,
            &w0,
            512,
            85_000,
            &phi,
            &CenteringMode::None,
        )
        .unwrap();
        assert!(
            (direct.value - 0.25).abs() <= 3.0 * direct.se + 0.02,
            "direct route {} +- {}",
            direct.value,
            direct.se
        );

        let path =
            estimate_measure_path(&config, &force, &noise, 4, 8.0, 256, 90_000).unwrap();
        let phi_tilde = |w: &SpectralVorticity, _: &TorusPoint| phi.eval(w);
        let chi = phi_tilde;
        let mc = SigmaMcConfig {
            config: &config,
            force: &force,
            noise: &noise,
            members: 48,
            id_base: 95_000,
        };
        let report = estimate_sigma2_corrector(&path, &phi_tilde, &chi, &mc).unwrap();
        assert!(
            (report.product_route.value - 0.25).abs() <= 3.5 * report.product_route.se,
            "product route {} +- {}",
            report.product_route.value,
            report.product_route.se
        );
        assert!(
            (report.y_route.value - 0.25).abs() <= 3.5 * report.y_route.se.max(0.004),
            "second-moment route {} +- {}",
            report.y_route.value,
            report.y_route.se
        );
        assert!(report.consistent);
        // The per-cell moment means barely vary along the angle: the
        // linear configuration is rotation invariant.
        let spread = report
            .y_cell_means
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
            - report
                .y_cell_means
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
        assert!(spread < 0.06, "cell spread {spread}");
    }

    #[test]
    fn birkhoff_averages_decay_at_the_geometric_bound() {
        let alpha = Frequency::golden_mean();
        let h0 = TorusPoint::new(vec![0.4]);
        let lengths: Vec<u64> = (3..=13).map(|e| 1u64 << e).collect();
        let report = birkhoff_rate(
            |h| h.components()[0].cos(),
            0.0,
            &alpha,
            &h0,
            &lengths,
            1e-12,
        )
        .unwrap();
        // Closed-form bound for a single harmonic: the rotation's partial
        // sums are bounded by 1/sin(alpha/2).
        let bound = 1.0 / (alpha.components()[0] / 2.0).sin();
        for (i, &n) in lengths.iter().enumerate() {
            assert!(
                report.errors[i] <= bound / n as f64 + 1e-12,
                "length {n}: error {} above the geometric bound",
                report.errors[i]
            );
        }
        let fit = report.fit.as_ref().expect("fit available");
        assert!(fit.exponent <= -0.5, "exponent {}", fit.exponent);

        // A constant has zero error everywhere and no fit.
        let flat = birkhoff_rate(|_| 2.5, 2.5, &alpha, &h0, &lengths, 1e-12).unwrap();
        assert!(flat.errors.iter().all(|&e| e == 0.0));
        assert!(flat.fit.is_none());
        // Degenerate grids are refused.
        assert!(birkhoff_rate(|_| 0.0, 0.0, &alpha, &h0, &[], 0.0).is_err());
        assert!(birkhoff_rate(|_| 0.0, 0.0, &alpha, &h0, &[4, 4], 0.0).is_err());
    }

    #[test]
    fn multinomial_identity_is_exact() {
        // Order one reduces to the binomial expansion.
        let xs = [1.5, -0.3, 2.2, 0.7];
        let check = multinomial_identity(&xs, 1).unwrap();
        let sum: f64 = xs.iter().sum();
        assert!((check.lhs - sum * sum).abs() <= 1e-12);
        assert!(check.residual <= 1e-12);

        // The canceling pair at order two gives zero on both sides.
        let check = multinomial_identity(&[1.0, -1.0], 2).unwrap();
        assert_eq!(check.lhs, 0.0);
        assert!(check.residual <= 1e-12, "residual {}", check.residual);

        // Randomized sweep across sizes and orders against the direct
        // power.
        use rand::Rng;
        let mut rng = stream_rng(SEED, tags::SCENARIO, 7, 0);
        let mut worst = 0.0f64;
        for trial in 0..10_000 {
            let m = 1 + (trial % 20);
            let p = 1 + (trial % 4) as u32;
            let xs: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let check = multinomial_identity(&xs, p).unwrap();
            worst = worst.max(check.residual);
        }
        assert!(worst <= 1e-9, "worst residual {worst}");

        // Domain guards.
        assert!(multinomial_identity(&[], 1).is_err());
        assert!(multinomial_identity(&[1.0], 0).is_err());
        assert!(multinomial_identity(&[1.0], 7).is_err());
        assert!(multinomial_identity(&vec![1.0; 65], 1).is_err());
    }

    #[test]
    fn holder_exponent_bound_holds_across_the_domain() {
        // Hand-computed equality case.
        let check = holder_exponent_bound(1.0, 1.0, 1.0, 1.0, (-2.0f64).exp()).unwrap();
        assert!((check.t_choice - 1.0).abs() <= 1e-12);
        assert!((check.lhs - 2.0 * (-1.0f64).exp()).abs() <= 1e-12);
        assert!((check.rhs - 2.0 * (-1.0f64).exp()).abs() <= 1e-12);
        assert!(check.pass);

        // Once delta reaches one the balancing time collapses to zero.
        let check = holder_exponent_bound(3.0, 0.7, 1.3, 0.5, 2.0).unwrap();
        assert_eq!(check.t_choice, 0.0);
        assert!(check.pass);

        // Randomized sweep over the admissible domain.
        use rand::Rng;
        let mut rng = stream_rng(SEED, tags::SCENARIO, 8, 0);
        for _ in 0..10_000 {
            let d_cap = 1.0 + rng.gen::<f64>() * 20.0;
            let l1 = 0.05 + rng.gen::<f64>() * 5.0;
            let l2 = 0.05 + rng.gen::<f64>() * 5.0;
            let gamma = (rng.gen::<f64>() * 0.999 + 0.001).min(1.0);
            let delta = (rng.gen::<f64>().powi(3) * d_cap).max(1e-9);
            let check = holder_exponent_bound(d_cap, l1, l2, gamma, delta).unwrap();
            assert!(
                check.pass,
                "violated at D = {d_cap}, l1 = {l1}, l2 = {l2}, g = {gamma}, d = {delta}: {} > {}",
                check.lhs, check.rhs
            );
        }
        // Domain guards.
        assert!(holder_exponent_bound(0.9, 1.0, 1.0, 1.0, 0.5).is_err());
        assert!(holder_exponent_bound(1.0, 0.0, 1.0, 1.0, 0.5).is_err());
        assert!(holder_exponent_bound(1.0, 1.0, 1.0, 1.5, 0.5).is_err());
        assert!(holder_exponent_bound(2.0, 1.0, 1.0, 1.0, 3.0).is_err());
    }

    #[test]
    fn lyapunov_bound_holds_without_noise() {
        let lattice = ModeLattice::new(2);
        let config = SimConfig::new(1.0, 0.05, lattice, false).unwrap();
        let force = QuasiPeriodicForce::zero(Frequency::golden_mean());
        let noise = NoiseConfig::silent();
        let lconfig = LyapunovConfig::new(0.05, 1.0, 0.5, 2.0).unwrap();
        let w0 = SpectralVorticity::harmonic_cos(&config.lattice, [1, 0], 1.5);
        let report = lyapunov_check(
            &lconfig,
            &config,
            &force,
            &noise,
            &w0,
            &TorusPoint::origin(1),
            &[0.0, 0.5, 1.0, 2.0, 4.0],
            64,
            100_000,
        )
        .unwrap();
        assert!(report.pass, "noise-free bound failed: {report:?}");
        // Deterministic decay: the observed mean is the exact exponential.
        for row in &report.rows {
            let expected = (lconfig.eta * (-2.0 * row.t).exp() * w0.norm_sq()).exp();
            assert!((row.lhs - expected).abs() <= 1e-9 * expected);
            assert_eq!(row.ess, 64.0);
        }
    }

    #[test]
    fn lyapunov_bound_matches_the_gaussian_moment() {
        let (config, force) = linear_setup(2, 1.0);
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        let b0 = noise.energy_input();
        // The admissible maximum is (1 - a) nu / (2 c B0); run at half.
        let eta_max = (1.0 - 0.5) / (2.0 * 2.0 * b0);
        let lconfig = LyapunovConfig::new(eta_max / 2.0, 1.0, 0.5, 2.0).unwrap();
        let times = [0.5, 1.0, 2.0, 4.0, 8.0];
        let report = lyapunov_check(
            &lconfig,
            &config,
            &force,
            &noise,
            &SpectralVorticity::zeros(&config.lattice),
            &TorusPoint::origin(1),
            &times,
            400,
            110_000,
        )
        .unwrap();
        assert!(report.pass, "linear bound failed: {report:?}");
        // Closed form: four independent Gaussian components, two at unit
        // rate and two at double rate.
        let theta = 8.0 * std::f64::consts::PI * std::f64::consts::PI * lconfig.eta;
        for (i, row) in report.rows.iter().enumerate() {
            let v1 = ou_component_variance(1.0, times[i]);
            let v2 = ou_component_variance(2.0, times[i]);
            let expected = 1.0 / ((1.0 - 2.0 * theta * v1) * (1.0 - 2.0 * theta * v2));
            assert!(
                (row.lhs - expected).abs() <= 4.0 * row.lhs_se + 1e-4,
                "t = {}: mean {} vs closed form {expected}",
                row.t,
                row.lhs
            );
        }
        // A tiny ensemble cannot carry the exponential average.
        assert!(matches!(
            lyapunov_check(
                &lconfig,
                &config,
                &force,
                &noise,
                &SpectralVorticity::zeros(&config.lattice),
                &TorusPoint::origin(1),
                &[1.0],
                20,
                111_000,
            ),
            Err(CoreError::EstimatorUnstable { .. })
        ));
        // A growth parameter beyond the admissible maximum is refused.
        let too_big = LyapunovConfig::new(eta_max * 2.0, 1.0, 0.5, 2.0).unwrap();
        assert!(lyapunov_check(
            &too_big,
            &config,
            &force,
            &noise,
            &SpectralVorticity::zeros(&config.lattice),
            &TorusPoint::origin(1),
            &[1.0],
            64,
            112_000,
        )
        .is_err());
    }

    #[test]
    fn continuity_bounds_hold_and_identical_pairs_vanish() {
        let (config, force) = linear_setup(2, 1.0);
        // Light noise keeps the admissible growth parameter large enough
        // that the envelope rate stays moderate and the exponential factors
        // finite: the inequality check is then non-vacuous.
        let noise = NoiseConfig::canonical_four(&config.lattice, 0.05, SEED);
        let b0 = noise.energy_input();
        let eta_max = (1.0 - 0.5) / (2.0 * 2.0 * b0);
        let lconfig = LyapunovConfig::new(eta_max / 2.0, 1.0, 0.5, 2.0).unwrap();
        let c0 = 0.25;
        let times = [0.5, 1.0, 2.0, 4.0];

        // Identical initial fields: the coupled distance is exactly zero.
        let w = SpectralVorticity::harmonic_cos(&config.lattice, [1, 0], 0.8);
        let pair = ContinuityPair::Initial {
            w1: w.clone(),
            w2: w.clone(),
            h: TorusPoint::origin(1),
        };
        let report = continuity_checks(
            &lconfig, &config, &force, &noise, &pair, c0, &times, 32, 120_000,
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.rows.iter().all(|r| r.lhs == 0.0));

        // Distinct initial fields in the linear configuration contract at
        // exactly twice the viscous rate.
        let w2 = SpectralVorticity::harmonic_cos(&config.lattice, [1, 0], 0.3);
        let delta_sq = w.sub(&w2).norm_sq();
        let pair = ContinuityPair::Initial {
            w1: w.clone(),
            w2,
            h: TorusPoint::origin(1),
        };
        let report = continuity_checks(
            &lconfig, &config, &force, &noise, &pair, c0, &times, 32, 121_000,
        )
        .unwrap();
        assert!(report.pass, "initial-condition bound failed: {report:?}");
        for (i, row) in report.rows.iter().enumerate() {
            let exact = delta_sq * (-2.0 * times[i]).exp();
            assert!(
                (row.lhs - exact).abs() <= 1e-6 * exact,
                "t = {}: distance {} vs exact {exact}",
                row.t,
                row.lhs
            );
            assert!(row.lhs_se <= 1e-9 * exact.max(1e-300));
        }

        // A quasi-periodic force separates two symbol angles; identical
        // angles stay glued.
        let forced = cos_force(&config.lattice, 0.2);
        let pair_same = ContinuityPair::Symbol {
            w0: SpectralVorticity::zeros(&config.lattice),
            h1: TorusPoint::new(vec![1.2]),
            h2: TorusPoint::new(vec![1.2]),
        };
        let report = continuity_checks(
            &lconfig, &config, &forced, &noise, &pair_same, c0, &times, 32, 122_000,
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.rows.iter().all(|r| r.lhs == 0.0));
        let pair_apart = ContinuityPair::Symbol {
            w0: SpectralVorticity::zeros(&config.lattice),
            h1: TorusPoint::new(vec![1.2]),
            h2: TorusPoint::new(vec![3.9]),
        };
        let report = continuity_checks(
            &lconfig, &config, &forced, &noise, &pair_apart, c0, &times, 32, 123_000,
        )
        .unwrap();
        assert!(report.pass, "symbol bound failed: {report:?}");
        assert!(report.rows.iter().all(|r| r.lhs > 0.0));
    }

    #[test]
    fn forward_averages_match_the_measure_path() {
        let (config, force) = linear_setup(2, 1.0);
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        let path =
            estimate_measure_path(&config, &force, &noise, 4, 8.0, 128, 130_000).unwrap();
        let w0 = SpectralVorticity::zeros(&config.lattice);
        let h0 = TorusPoint::new(vec![0.7]);

        // A constant observable agrees exactly on both sides.
        let constant = Observable::exp_weighted(0.0, 0.001).unwrap();
        let report = forward_average_check(
            &config, &force, &noise, &w0, &h0, 1.0, 8, 64, 140_000, &constant, &path,
        )
        .unwrap();
        assert_eq!(report.forward_mean, 1.0);
        assert_eq!(report.reference_mean, 1.0);
        assert!(report.overlap);

        // An odd observable averages to zero on both sides within error.
        let phi = Observable::mode_re([1, 0], 0.01).unwrap();
        let report = forward_average_check(
            &config, &force, &noise, &w0, &h0, 2.0, 10, 128, 141_000, &phi, &path,
        )
        .unwrap();
        assert!(report.overlap, "forward average check failed: {report:?}");
        assert!(report.forward_mean.abs() < 0.15);
        // Spacing below one is refused.
        assert!(forward_average_check(
            &config, &force, &noise, &w0, &h0, 0.5, 4, 16, 142_000, &phi, &path,
        )
        .is_err());
    }

    #[test]
    fn centering_removes_the_drift_of_a_mean_shifted_observable() {
        let (config, force) = linear_setup(2, 1.0);
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        let path =
            estimate_measure_path(&config, &force, &noise, 2, 8.0, 384, 150_000).unwrap();
        let w0 = SpectralVorticity::zeros(&config.lattice);
        let h0 = TorusPoint::origin(1);
        let phi = Observable::energy(0.001).unwrap();
        let horizon = [64.0];
        let uncentered = time_average_ensemble(
            &config,
            &force,
            &noise,
            0.0,
            &horizon,
            &h0,
            &w0,
            64,
            160_000,
            &phi,
            &CenteringMode::None,
        )
        .unwrap();
        let centered = time_average_ensemble(
            &config,
            &force,
            &noise,
            0.0,
            &horizon,
            &h0,
            &w0,
            64,
            160_000,
            &phi,
            &CenteringMode::Path(&path),
        )
        .unwrap();
        let (mu_unc, _) = mean_with_se(&uncentered[0]);
        let (mu_c, se_c) = mean_with_se(&centered[0]);
        // The stationary energy is 3 pi^2 in closed form; uncentered
        // averages sit there, centered ones near zero.
        let stationary = 3.0 * std::f64::consts::PI * std::f64::consts::PI;
        assert!(
            (mu_unc - stationary).abs() < 0.2 * stationary,
            "uncentered mean {mu_unc} far from {stationary}"
        );
        // The centered mean carries the measure estimate's shared cell
        // error (common to all members, so invisible to se_c); the floor
        // covers it at the chosen particle count.
        assert!(
            mu_c.abs() < mu_unc / 10.0,
            "centering left mean {mu_c} (uncentered {mu_unc})"
        );
        assert!(mu_c.abs() <= 3.5 * se_c.max(1.0), "centered mean {mu_c} +- {se_c}");
    }

    #[test]
    fn centered_mean_decays_at_the_spectral_rate() {
        let (config, force) = linear_setup(2, 1.0);
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        // Start far from the mean so the decay dominates the noise.
        let w0 = SpectralVorticity::harmonic_cos(&config.lattice, [1, 0], 4.0);
        let h0 = TorusPoint::origin(1);
        let phi = Observable::mode_re([1, 0], 0.01).unwrap();
        let times = [0.25, 0.75, 1.25, 1.75, 2.5, 3.5];
        let (abs_means, fit) = centered_mean_decay(
            &config,
            &force,
            &noise,
            &w0,
            &h0,
            &times,
            512,
            170_000,
            &phi,
            &CenteringMode::None,
        )
        .unwrap();
        assert!(abs_means[0] > abs_means[5]);
        assert!(
            (fit.exponent + 1.0).abs() < 0.1,
            "decay exponent {} should be near -1",
            fit.exponent
        );
        assert!(fit.r_squared > 0.99);
    }

    #[test]
    fn time_average_engine_is_deterministic_and_validates() {
        let (config, force) = linear_setup(2, 1.0);
        let noise = NoiseConfig::canonical_four(&config.lattice, 1.0, SEED);
        let w0 = SpectralVorticity::zeros(&config.lattice);
        let h0 = TorusPoint::origin(1);
        let phi = Observable::mode_re([1, 0], 0.01).unwrap();
        let run = || {
            time_average_ensemble(
                &config,
                &force,
                &noise,
                0.0,
                &[4.0, 8.0],
                &h0,
                &w0,
                24,
                180_000,
                &phi,
                &CenteringMode::LeaveOneOut,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        for (ra, rb) in a.iter().zip(&b) {
            for (va, vb) in ra.iter().zip(rb) {
                assert_eq!(va.to_bits(), vb.to_bits());
            }
        }
        // Horizons off the grid, non-increasing, or before the start are
        // refused; leave-one-out needs company.
        let bad = time_average_ensemble(
            &config,
            &force,
            &noise,
            0.0,
            &[4.003],
            &h0,
            &w0,
            4,
            0,
            &phi,
            &CenteringMode::None,
        );
        assert!(bad.is_err());
        assert!(time_average_ensemble(
            &config,
            &force,
            &noise,
            0.0,
            &[4.0, 4.0],
            &h0,
            &w0,
            4,
            0,
            &phi,
            &CenteringMode::None,
        )
        .is_err());
        assert!(time_average_ensemble(
            &config,
            &force,
            &noise,
            0.0,
            &[4.0],
            &h0,
            &w0,
            1,
            0,
            &phi,
            &CenteringMode::LeaveOneOut,
        )
        .is_err());
    }
}
