//! Large-viscosity laminar regime: viscosity thresholds, the pullback limit
//! field over the driving torus, two-sided contraction probes around it, and
//! the moment continuity of the limit in the torus angle.
//!
//! The pullback construction runs the equation from zero initial data at a
//! schedule of start times deeper and deeper in the past, always ending at
//! time 0 with a prescribed torus angle. Noise increments are addressed by
//! absolute grid index, so runs of different depths share the increments on
//! their common time window and the gaps between consecutive depths measure
//! genuine Cauchy convergence along one realization.

use std::sync::Arc;

use crate::error::CoreError;
use crate::Result;
use crate::fit::{self, LinearFit, RateFit};
use crate::forcing::{rotate, NoiseConfig, QuasiPeriodicForce, TorusPoint};
use crate::integrator::{run_sampled, simulate_pullback, SimConfig, Stepper, WienerPath};
use crate::reduce::par_map_indexed;
use crate::rng;
use crate::spectral::{ModeLattice, SpectralVorticity};

/// Threshold report for the laminar regime. `c0` is the interpolation
/// constant of the L^4 inequality `|w|_{L^4}^2 <= c0 |w|_1 |w|`; callers
/// usually pass an empirical lower bound for it, so a failed condition is
/// final while a passing one is only as strong as the estimate.
#[derive(Debug, Clone)]
pub struct LaminarThresholds {
    /// Grashof number `sqrt(|f|_inf^2 / nu^4 + b0 / nu^3)`.
    pub grashof: f64,
    /// Contraction margin `nu - c0^2 nu^-2 (|f|_inf^2 / nu + b0)`. Positive
    /// exactly when `grashof * c0 < 1`.
    pub delta0: f64,
    /// Interpolation constant both conditions were evaluated with.
    pub c0: f64,
    /// `grashof * c0 <= sqrt(1/2)`.
    pub contraction_condition: bool,
    /// `nu^3 > 8 (torus_dim + eta_bar) c0^2 b0 / gamma`, the moment budget
    /// behind the continuity of the limit field in the torus angle.
    pub continuity_condition: bool,
}

impl LaminarThresholds {
    pub fn all_pass(&self) -> bool {
        self.contraction_condition && self.continuity_condition
    }

    /// True when some condition fails. With a lower-bound `c0` this verdict
    /// cannot be rescued by a sharper estimate, whereas `all_pass` could
    /// still be lost to one.
    pub fn certified_fail(&self) -> bool {
        !self.all_pass()
    }
}

/// Evaluate the laminar-regime conditions for viscosity `nu`, deterministic
/// forcing bound `f_sup`, noise energy input rate `b0`, interpolation
/// constant `c0`, torus dimension, continuity margin `eta_bar`, and the
/// Holder exponent `gamma` of the force in the torus angle.
pub fn thresholds(
    nu: f64,
    f_sup: f64,
    b0: f64,
    c0: f64,
    torus_dim: usize,
    eta_bar: f64,
    gamma: f64,
) -> Result<LaminarThresholds> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(CoreError::invalid(format!("viscosity must be positive, got {nu}")));
    }
    if !(f_sup >= 0.0 && f_sup.is_finite()) {
        return Err(CoreError::invalid(format!(
            "forcing bound must be nonnegative, got {f_sup}"
        )));
    }
    if !(b0 >= 0.0 && b0.is_finite()) {
        return Err(CoreError::invalid(format!(
            "noise energy rate must be nonnegative, got {b0}"
        )));
    }
    if !(c0 > 0.0 && c0.is_finite()) {
        return Err(CoreError::invalid(format!(
            "interpolation constant must be positive, got {c0}"
        )));
    }
    if torus_dim == 0 {
        return Err(CoreError::invalid("torus dimension must be at least 1"));
    }
    if !(eta_bar > 0.0 && eta_bar.is_finite()) {
        return Err(CoreError::invalid(format!(
            "continuity margin must be positive, got {eta_bar}"
        )));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(CoreError::invalid(format!(
            "Holder exponent must lie in (0, 1], got {gamma}"
        )));
    }
    let grashof = (f_sup * f_sup / nu.powi(4) + b0 / nu.powi(3)).sqrt();
    let delta0 = nu - c0 * c0 / (nu * nu) * (f_sup * f_sup / nu + b0);
    let contraction_condition = grashof * c0 <= 0.5f64.sqrt();
    let continuity_condition =
        nu.powi(3) > 8.0 * (torus_dim as f64 + eta_bar) * c0 * c0 * b0 / gamma;
    Ok(LaminarThresholds {
        grashof,
        delta0,
        c0,
        contraction_condition,
        continuity_condition,
    })
}

/// Pullback limit table: one field per (torus grid point, driving path),
/// taken at the deepest depth of a geometric schedule, together with the
/// Cauchy gaps between consecutive depths that justify calling it a limit.
#[derive(Debug, Clone)]
pub struct PullbackSolution {
    pub h_points: Vec<TorusPoint>,
    /// Driving path ids, one realization per id.
    pub trajectories: Vec<u64>,
    /// Deepest state per job, row-major over (grid point, path).
    pub states: Vec<SpectralVorticity>,
    /// Depth schedule actually run: `base, 2 base, 4 base, ...`.
    pub depths: Vec<f64>,
    /// Gaps `|Q(d_{i+1}) - Q(d_i)|` per job, row-major as `states`.
    pub deltas: Vec<Vec<f64>>,
    /// Per-job flag: the last gap is at or below the tolerance.
    pub converged: Vec<bool>,
    pub tolerance: f64,
}

impl PullbackSolution {
    fn job(&self, h_idx: usize, traj_idx: usize) -> usize {
        assert!(h_idx < self.h_points.len() && traj_idx < self.trajectories.len());
        h_idx * self.trajectories.len() + traj_idx
    }

    /// Limit field at one grid point under one driving path.
    pub fn state(&self, h_idx: usize, traj_idx: usize) -> &SpectralVorticity {
        &self.states[self.job(h_idx, traj_idx)]
    }

    /// Cauchy gaps for one job, ordered by depth.
    pub fn delta_curve(&self, h_idx: usize, traj_idx: usize) -> &[f64] {
        &self.deltas[self.job(h_idx, traj_idx)]
    }

    /// Deepest depth of the schedule.
    pub fn depth(&self) -> f64 {
        *self.depths.last().expect("schedule is nonempty")
    }

    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }
}

/// Run the pullback construction on a grid of torus angles and a set of
/// driving paths. Every job starts from the zero field at depths
/// `base_depth * 2^i` for `i = 0..=doublings` and integrates to time 0 with
/// the symbol arranged to pass through its grid angle there. Jobs are
/// independent and run in parallel; results do not depend on thread count.
pub fn compute_pullback_solution(
    config: &SimConfig,
    force: &QuasiPeriodicForce,
    noise: &NoiseConfig,
    h_points: &[TorusPoint],
    trajectories: &[u64],
    base_depth: f64,
    doublings: usize,
    tolerance: f64,
) -> Result<PullbackSolution> {
    if h_points.is_empty() || trajectories.is_empty() {
        return Err(CoreError::invalid(
            "pullback needs at least one grid point and one driving path",
        ));
    }
    let dim = force.frequency.dim();
    if let Some(h) = h_points.iter().find(|h| h.dim() != dim) {
        return Err(CoreError::invalid(format!(
            "grid point has dimension {}, frequency has {}",
            h.dim(),
            dim
        )));
    }
    if !(base_depth > 0.0 && base_depth.is_finite()) {
        return Err(CoreError::invalid(format!(
            "base depth must be positive, got {base_depth}"
        )));
    }
    if doublings == 0 {
        return Err(CoreError::invalid(
            "schedule needs at least one doubling to measure a convergence gap",
        ));
    }
    if !(tolerance >= 0.0) {
        return Err(CoreError::invalid("tolerance must be nonnegative"));
    }
    let depths: Vec<f64> = (0..=doublings)
        .map(|i| base_depth * (1u64 << i) as f64)
        .collect();
    let n_traj = trajectories.len();
    let jobs = h_points.len() * n_traj;
    let per_job: Vec<Result<(SpectralVorticity, Vec<f64>)>> = par_map_indexed(jobs, |job| {
        let h = &h_points[job / n_traj];
        let trajectory = trajectories[job % n_traj];
        let mut stepper = Stepper::new(config.clone(), force.clone(), noise.clone())?;
        let path = WienerPath::new(noise.seed, trajectory);
        let w0 = SpectralVorticity::zeros(&config.lattice);
        let mut gaps = Vec::with_capacity(depths.len() - 1);
        let mut prev: Option<SpectralVorticity> = None;
        for &depth in &depths {
            let state = simulate_pullback(&mut stepper, depth, h, &w0, &path)?;
            if let Some(p) = &prev {
                gaps.push(state.sub(p).norm());
            }
            prev = Some(state);
        }
        Ok((prev.expect("schedule is nonempty"), gaps))
    });
    let mut states = Vec::with_capacity(jobs);
    let mut deltas = Vec::with_capacity(jobs);
    let mut converged = Vec::with_capacity(jobs);
    for r in per_job {
        let (state, gaps) = r?;
        converged.push(gaps.last().is_some_and(|&g| g <= tolerance));
        states.push(state);
        deltas.push(gaps);
    }
    Ok(PullbackSolution {
        h_points: h_points.to_vec(),
        trajectories: trajectories.to_vec(),
        states,
        depths,
        deltas,
        converged,
        tolerance,
    })
}

/// Which side of the reference epoch the perturbations attack from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttractionDirection {
    /// Perturb at time 0 and follow the gap forward over the sample times.
    Forward,
    /// Perturb at increasing depths in the past and measure the gap at
    /// time 0; sample times are read as depths.
    Pullback,
}

/// Inputs of one attraction probe around a reference state.
#[derive(Debug, Clone)]
pub struct AttractionProbe<'a> {
    pub config: &'a SimConfig,
    pub force: &'a QuasiPeriodicForce,
    pub noise: &'a NoiseConfig,
    /// Torus angle of the reference at time 0.
    pub h0: &'a TorusPoint,
    /// Driving path shared by the reference and every perturbed run.
    pub trajectory: u64,
    /// Reference state at time 0, normally a converged pullback field for
    /// this angle and path.
    pub w_star: &'a SpectralVorticity,
    /// Extra pullback depth behind the deepest perturbation epoch, used only
    /// in the pullback direction to regenerate past reference states.
    pub settle: f64,
    /// Perturbation radius in the plain norm.
    pub radius: f64,
    pub members: usize,
    /// Seed of the perturbation-direction stream, independent of the noise.
    pub perturbation_seed: u64,
}

/// Squared-gap record of same-noise perturbations around a reference.
#[derive(Debug, Clone)]
pub struct AttractionReport {
    /// Elapsed separations: forward times or pullback depths.
    pub times: Vec<f64>,
    /// Ensemble mean squared gap per separation.
    pub mean_sq: Vec<f64>,
    /// Ensemble max squared gap per separation.
    pub max_sq: Vec<f64>,
    pub radius: f64,
    /// Log-linear fit of the mean squared gap. `None` when the gap vanishes
    /// identically, as it does at radius 0.
    pub fit: Option<RateFit>,
    /// Fitted decay rate, minus the fit exponent; 0 in the identically-zero
    /// case.
    pub rate: f64,
    /// Earliest sampled separation from which `radius^2 exp(-rate t)` bounds
    /// every later max gap.
    pub onset: Option<f64>,
    /// Same scan per member against the shared fitted envelope.
    pub member_onsets: Vec<Option<f64>>,
    /// Gap between the regenerated reference at time 0 and the provided
    /// state; always 0 in the forward direction, which uses the provided
    /// state directly.
    pub reference_drift: f64,
    /// Regime flag: the fitted rate is positive or the gap is identically
    /// zero. False means the perturbations do not contract here.
    pub decaying: bool,
    pub pass: bool,
}

impl AttractionReport {
    /// Earliest sampled separation from which `radius^2 exp(-delta t)`
    /// bounds every later max gap, for an arbitrary candidate rate.
    pub fn onset_for(&self, delta: f64) -> Option<f64> {
        envelope_onset(&self.times, &self.max_sq, self.radius, delta)
    }
}

/// Earliest time index from which the envelope bounds every later sample,
/// with a hair of relative slack so exact-equality boundaries do not flicker.
fn envelope_onset(times: &[f64], gaps_sq: &[f64], radius: f64, delta: f64) -> Option<f64> {
    let mut onset = None;
    for j in (0..times.len()).rev() {
        let envelope = radius * radius * (-delta * times[j]).exp();
        if gaps_sq[j] <= envelope * (1.0 + 1e-9) {
            onset = Some(times[j]);
        } else {
            break;
        }
    }
    onset
}

/// Random direction on the sphere of the given radius, drawn from a stream
/// keyed by (member, epoch) so parallel order cannot change it.
fn perturbation(
    lattice: &Arc<ModeLattice>,
    seed: u64,
    member: u64,
    epoch: u64,
    radius: f64,
) -> SpectralVorticity {
    let mut rng = rng::stream_rng(seed, rng::tags::INITIAL, member, epoch);
    let mut dir = SpectralVorticity::random_gaussian(lattice, &mut rng, 0.0);
    let norm = dir.norm();
    if norm > 0.0 {
        dir.scale(radius / norm);
    }
    dir
}

/// Probe the exponential attraction of the reference state: perturbed copies
/// share the driving path with the reference, so the gap dynamics sees only
/// the contraction, never fresh noise. Forward direction perturbs at time 0
/// and follows the gap; pullback direction perturbs past reference states at
/// each depth and measures the gap left at time 0. The report passes when
/// the fitted rate is positive and the envelope `radius^2 exp(-rate t)`
/// bounds every sampled gap from some onset onward.
pub fn attraction_test(
    probe: &AttractionProbe,
    times: &[f64],
    direction: AttractionDirection,
) -> Result<AttractionReport> {
    if probe.members == 0 {
        return Err(CoreError::invalid("attraction probe needs members"));
    }
    if !(probe.radius >= 0.0 && probe.radius.is_finite()) {
        return Err(CoreError::invalid(format!(
            "radius must be nonnegative, got {}",
            probe.radius
        )));
    }
    if !(probe.settle >= 0.0 && probe.settle.is_finite()) {
        return Err(CoreError::invalid(format!(
            "settle depth must be nonnegative, got {}",
            probe.settle
        )));
    }
    if times.len() < 3 {
        return Err(CoreError::invalid(
            "attraction probe needs at least three sample separations",
        ));
    }
    if times[0] <= 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CoreError::invalid(
            "sample separations must be positive and strictly increasing",
        ));
    }
    if probe.h0.dim() != probe.force.frequency.dim() {
        return Err(CoreError::invalid("torus angle dimension mismatch"));
    }
    let (series, reference_drift) = match direction {
        AttractionDirection::Forward => forward_gaps(probe, times)?,
        AttractionDirection::Pullback => pullback_gaps(probe, times)?,
    };
    let mut mean_sq = vec![0.0f64; times.len()];
    let mut max_sq = vec![0.0f64; times.len()];
    for member in &series {
        for (j, &g) in member.iter().enumerate() {
            mean_sq[j] += g / series.len() as f64;
            max_sq[j] = max_sq[j].max(g);
        }
    }
    let identically_zero = max_sq.iter().all(|&g| g == 0.0);
    let (fit, rate) = if identically_zero {
        (None, 0.0)
    } else {
        let fit = fit::rate_fit(times, &mean_sq, 0.0)?;
        let rate = -fit.exponent;
        (Some(fit), rate)
    };
    let onset = envelope_onset(times, &max_sq, probe.radius, rate);
    let member_onsets = series
        .iter()
        .map(|gaps| envelope_onset(times, gaps, probe.radius, rate))
        .collect();
    let decaying = identically_zero || rate > 0.0;
    let pass = decaying && onset.is_some();
    Ok(AttractionReport {
        times: times.to_vec(),
        mean_sq,
        max_sq,
        radius: probe.radius,
        fit,
        rate,
        onset,
        member_onsets,
        reference_drift,
        decaying,
        pass,
    })
}

/// Forward gaps: one reference run from the provided state, then one run per
/// member from a perturbed start under the same path.
fn forward_gaps(probe: &AttractionProbe, times: &[f64]) -> Result<(Vec<Vec<f64>>, f64)> {
    let path = WienerPath::new(probe.noise.seed, probe.trajectory);
    let mut stepper = Stepper::new(
        probe.config.clone(),
        probe.force.clone(),
        probe.noise.clone(),
    )?;
    let reference = run_sampled(&mut stepper, 0.0, times, probe.h0, probe.w_star, &path)?;
    let series: Vec<Result<Vec<f64>>> = par_map_indexed(probe.members, |m| {
        let mut stepper = Stepper::new(
            probe.config.clone(),
            probe.force.clone(),
            probe.noise.clone(),
        )?;
        let mut start = probe.w_star.clone();
        let dir = perturbation(
            &probe.config.lattice,
            probe.perturbation_seed,
            m as u64,
            0,
            probe.radius,
        );
        start.add_scaled(&dir, 1.0);
        let states = run_sampled(&mut stepper, 0.0, times, probe.h0, &start, &path)?;
        Ok(states
            .iter()
            .zip(&reference)
            .map(|(w, r)| w.sub(r).norm_sq())
            .collect())
    });
    let series = series.into_iter().collect::<Result<_>>()?;
    Ok((series, 0.0))
}

/// Pullback gaps: regenerate the reference over the whole depth window in
/// one run from zero data, then perturb its state at each depth and measure
/// what remains of the gap at time 0 under the shared path.
fn pullback_gaps(probe: &AttractionProbe, depths: &[f64]) -> Result<(Vec<Vec<f64>>, f64)> {
    let deepest = *depths.last().expect("validated nonempty");
    let start_time = -(deepest + probe.settle);
    let mut sample_times: Vec<f64> = depths.iter().rev().map(|d| -d).collect();
    sample_times.push(0.0);
    let path = WienerPath::new(probe.noise.seed, probe.trajectory);
    let mut stepper = Stepper::new(
        probe.config.clone(),
        probe.force.clone(),
        probe.noise.clone(),
    )?;
    let h_start = rotate(probe.h0, &probe.force.frequency, start_time);
    let zeros = SpectralVorticity::zeros(&probe.config.lattice);
    let sampled = run_sampled(
        &mut stepper,
        start_time,
        &sample_times,
        &h_start,
        &zeros,
        &path,
    )?;
    let ref0 = sampled.last().expect("one sample per requested time").clone();
    let reference_drift = ref0.sub(probe.w_star).norm();
    let k = depths.len();
    let series: Vec<Result<Vec<f64>>> = par_map_indexed(probe.members, |m| {
        let mut stepper = Stepper::new(
            probe.config.clone(),
            probe.force.clone(),
            probe.noise.clone(),
        )?;
        let mut gaps = Vec::with_capacity(k);
        for (j, &depth) in depths.iter().enumerate() {
            // sampled[0..k] are the past reference states, deepest first.
            let past = &sampled[k - 1 - j];
            let mut start = past.clone();
            let dir = perturbation(
                &probe.config.lattice,
                probe.perturbation_seed,
                m as u64,
                j as u64 + 1,
                probe.radius,
            );
            start.add_scaled(&dir, 1.0);
            let h = rotate(probe.h0, &probe.force.frequency, -depth);
            let finals = run_sampled(&mut stepper, -depth, &[0.0], &h, &start, &path)?;
            gaps.push(finals[0].sub(&ref0).norm_sq());
        }
        Ok(gaps)
    });
    let series = series.into_iter().collect::<Result<_>>()?;
    Ok((series, reference_drift))
}

/// Moment-regression report for the continuity of the pullback field in the
/// torus angle.
#[derive(Debug, Clone)]
pub struct HolderReport {
    /// Half the moment order: gaps enter as `|.|^(2p)`.
    pub p: u32,
    /// Torus separations per pair, parallel to `moments`.
    pub separations: Vec<f64>,
    /// Path-averaged gap moments per pair.
    pub moments: Vec<f64>,
    /// Log-log regression of moments on separations. `None` when every
    /// moment vanishes.
    pub fit: Option<LinearFit>,
    pub slope: f64,
    /// Pairs dropped from the regression for a vanishing moment.
    pub censored: usize,
    /// Every moment vanishes: the field does not depend on the angle.
    pub degenerate: bool,
    /// Target: slope at least `p * gamma - 0.2`, trivially met when
    /// degenerate.
    pub pass: bool,
}

/// Regress the path-averaged gap moments `E |Q(h1) - Q(h2)|^(2p)` of a
/// pullback table against the torus separation `|h1 - h2|` on log-log axes.
/// A field inheriting the Holder exponent `gamma` of the force shows slope
/// at least `p * gamma` up to sampling error; the pass gate allows 0.2 of
/// slack. Needs pairs spread over at least four distinct separation scales.
pub fn holder_field_test(
    solution: &PullbackSolution,
    p: u32,
    pairs: &[(usize, usize)],
    gamma: f64,
) -> Result<HolderReport> {
    if p == 0 {
        return Err(CoreError::invalid("moment order must be at least 1"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(CoreError::invalid(format!(
            "Holder exponent must lie in (0, 1], got {gamma}"
        )));
    }
    if pairs.is_empty() {
        return Err(CoreError::invalid("no grid pairs supplied"));
    }
    let npts = solution.h_points.len();
    let ntraj = solution.trajectories.len();
    let mut separations = Vec::with_capacity(pairs.len());
    let mut moments = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        if a >= npts || b >= npts {
            return Err(CoreError::invalid(format!(
                "pair ({a}, {b}) outside the grid of {npts} points"
            )));
        }
        let sep = solution.h_points[a].distance(&solution.h_points[b]);
        if sep == 0.0 {
            return Err(CoreError::invalid(
                "pairs must join distinct grid points",
            ));
        }
        let mut acc = 0.0;
        for t in 0..ntraj {
            let gap_sq = solution.state(a, t).sub(solution.state(b, t)).norm_sq();
            acc += gap_sq.powi(p as i32);
        }
        separations.push(sep);
        moments.push(acc / ntraj as f64);
    }
    if moments.iter().all(|&m| m == 0.0) {
        return Ok(HolderReport {
            p,
            separations,
            moments,
            fit: None,
            slope: 0.0,
            censored: pairs.len(),
            degenerate: true,
            pass: true,
        });
    }
    let mut xs = Vec::with_capacity(pairs.len());
    let mut ys = Vec::with_capacity(pairs.len());
    for (i, &m) in moments.iter().enumerate() {
        if m > 0.0 {
            xs.push(separations[i].ln());
            ys.push(m.ln());
        }
    }
    let censored = moments.len() - xs.len();
    if distinct_scales(&xs) < 4 {
        return Err(CoreError::invalid(
            "need pairs over at least four distinct separation scales",
        ));
    }
    let fit = fit::ols(&xs, &ys)?;
    let slope = fit.slope;
    let pass = slope >= p as f64 * gamma - 0.2;
    Ok(HolderReport {
        p,
        separations,
        moments,
        fit: Some(fit),
        slope,
        censored,
        degenerate: false,
        pass,
    })
}

/// Count separation scales, merging log-separations closer than 1e-6.
fn distinct_scales(log_seps: &[f64]) -> usize {
    let mut sorted = log_seps.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut count = 0;
    let mut last = f64::NEG_INFINITY;
    for &x in &sorted {
        if x - last > 1e-6 {
            count += 1;
            last = x;
        }
    }
    count
}
