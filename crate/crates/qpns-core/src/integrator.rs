//! Time integration of the truncated vorticity equation and its
//! skew-product form.
//!
//! The scheme treats the dissipative linear part exactly: over one step the
//! mode `k` is damped by `exp(-nu |k|^2 dt)`, the deterministic drift
//! (forcing minus advection, frozen at the left endpoint) enters through the
//! exact integrated weight `(1 - exp(-nu |k|^2 dt)) / (nu |k|^2)`, and each
//! noise direction adds one scalar Gaussian increment scaled per mode so the
//! stationary and transient per-mode variances match the
//! Ornstein-Uhlenbeck closed forms for every step size. With the
//! nonlinearity off the scheme is exact in law mode by mode, which is what
//! makes the closed-form statistical oracles downstream possible.
//!
//! Driving noise is addressed by absolute step index on a fixed grid, with
//! negative indices drawn from an independent stream, so restarts,
//! time-shifted reruns, and pullback starts all consume the same increments
//! they would have seen in one long run.

use std::sync::Arc;

use serde::Serialize;

use crate::forcing::{rotate, NoiseConfig, QuasiPeriodicForce, TorusPoint};
use crate::reduce::par_map_indexed;
use crate::rng;
use crate::spectral::{nonlinear_term_with, AdvectionWorkspace, ModeLattice, SpectralVorticity};
use crate::{CoreError, Result};

/// Coefficient magnitude beyond which a trajectory is declared blown up.
const BLOW_UP_CAP: f64 = 1e12;

/// Discretization parameters of one run.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub nu: f64,
    pub dt: f64,
    pub lattice: Arc<ModeLattice>,
    pub nonlinearity: bool,
}

impl SimConfig {
    pub fn new(nu: f64, dt: f64, lattice: Arc<ModeLattice>, nonlinearity: bool) -> Result<Self> {
        if !(nu > 0.0) || !(dt > 0.0) {
            return Err(CoreError::invalid("viscosity and step size must be positive"));
        }
        Ok(SimConfig {
            nu,
            dt,
            lattice,
            nonlinearity,
        })
    }

    /// Accuracy figure `dt nu N^2`: the damping accrued by the stiffest mode
    /// per step. The linear part is exact at any value; past 2 the explicit
    /// drift term is no longer resolved and results get warned about.
    pub fn stiffness_product(&self) -> f64 {
        self.dt * self.nu * (self.lattice.radius() as f64).powi(2)
    }

    pub fn accuracy_warning(&self) -> Option<String> {
        let p = self.stiffness_product();
        (p > 2.0).then(|| {
            format!("dt * nu * N^2 = {p:.3} exceeds 2; drift terms are unresolved at this step size")
        })
    }
}

/// Addressable two-sided Wiener path of one trajectory: increments are read
/// by (direction, absolute step index), never stored. `time_shifted` yields
/// the path whose step `j` reads the base path at step `j + offset`, the
/// discrete Wiener shift.
#[derive(Debug, Clone, Copy)]
pub struct WienerPath {
    master: u64,
    trajectory: u64,
    offset: i64,
}

impl WienerPath {
    pub fn new(master: u64, trajectory: u64) -> Self {
        WienerPath {
            master,
            trajectory,
            offset: 0,
        }
    }

    pub fn time_shifted(&self, steps: i64) -> Self {
        WienerPath {
            master: self.master,
            trajectory: self.trajectory,
            offset: self.offset + steps,
        }
    }

    /// Standard normal increment (scaled by `1/sqrt(dt)`) for one direction
    /// and one step of the grid.
    pub fn increment(&self, direction: u16, step: i64) -> f64 {
        rng::noise_increment(self.master, self.trajectory, direction, step + self.offset)
    }
}

/// State of the skew-product system: field plus torus angle.
#[derive(Debug, Clone)]
pub struct HomogenizedState {
    pub w: SpectralVorticity,
    pub h: TorusPoint,
}

/// One stored trajectory sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub t: f64,
    pub h: TorusPoint,
    pub w: SpectralVorticity,
}

/// Integration record: initial data, samples at grid times, and the running
/// enstrophy integral `int |w|_1^2 dt` (left-endpoint rule on the step grid).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub s: f64,
    pub dt: f64,
    pub h_start: TorusPoint,
    pub samples: Vec<Sample>,
    pub enstrophy_integral: f64,
}

impl Trajectory {
    pub fn final_sample(&self) -> &Sample {
        self.samples.last().expect("trajectory stores its start")
    }
}

/// Reusable integration worker: per-mode exponential factors for one
/// (nu, dt, lattice) triple plus the FFT workspace. One instance per thread.
pub struct Stepper {
    config: SimConfig,
    force: QuasiPeriodicForce,
    noise: NoiseConfig,
    ws: AdvectionWorkspace,
    decay: Vec<f64>,
    drift_weight: Vec<f64>,
    noise_scale: Vec<f64>,
}

impl Stepper {
    pub fn new(config: SimConfig, force: QuasiPeriodicForce, noise: NoiseConfig) -> Result<Self> {
        let ws = AdvectionWorkspace::new(config.lattice.radius());
        let mut decay = Vec::with_capacity(config.lattice.half_count());
        let mut drift_weight = Vec::with_capacity(config.lattice.half_count());
        let mut noise_scale = Vec::with_capacity(config.lattice.half_count());
        for &[k1, k2] in config.lattice.half_modes() {
            let lam = config.nu * (k1 * k1 + k2 * k2) as f64;
            let d = (-lam * config.dt).exp();
            decay.push(d);
            drift_weight.push((1.0 - d) / lam);
            noise_scale.push(((1.0 - d * d) / (2.0 * lam)).sqrt());
        }
        for g in noise.directions() {
            if !Arc::ptr_eq(g.lattice(), &config.lattice) && g.lattice().radius() != config.lattice.radius() {
                return Err(CoreError::LatticeMismatch {
                    left: config.lattice.radius(),
                    right: g.lattice().radius(),
                });
            }
        }
        Ok(Stepper {
            config,
            force,
            noise,
            ws,
            decay,
            drift_weight,
            noise_scale,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn force(&self) -> &QuasiPeriodicForce {
        &self.force
    }

    pub fn noise(&self) -> &NoiseConfig {
        &self.noise
    }

    /// Advance `w` by one step from time `t` with torus angle `h`, consuming
    /// the increments of absolute step index `step_index`.
    pub fn step(
        &mut self,
        w: &mut SpectralVorticity,
        h: &TorusPoint,
        path: &WienerPath,
        step_index: i64,
        t: f64,
    ) -> Result<()> {
        let force_field = self.force.eval(&self.config.lattice, h);
        let advection = self
            .config
            .nonlinearity
            .then(|| nonlinear_term_with(w, &mut self.ws));

        let coeffs = w.coeffs_mut();
        for i in 0..coeffs.len() {
            let mut drift = force_field.coeffs()[i];
            if let Some(b) = &advection {
                drift -= b.coeffs()[i];
            }
            coeffs[i] = self.decay[i] * coeffs[i] + self.drift_weight[i] * drift;
        }
        for (dir, g) in self.noise.directions().iter().enumerate() {
            let xi = path.increment(dir as u16, step_index);
            for i in 0..coeffs.len() {
                coeffs[i] += g.coeffs()[i] * (self.noise_scale[i] * xi);
            }
        }

        if !w.is_finite() || w.max_coeff() > BLOW_UP_CAP {
            return Err(CoreError::BlowUp {
                time: t + self.config.dt,
            });
        }
        Ok(())
    }

    /// Integrate from `s` for `steps` steps, reporting the state after every
    /// step (and the initial state first) to the observer. Times and angles
    /// are derived from the start in one multiplication each, so the torus
    /// component satisfies `h(t) = rotate(h_start, alpha, t - s)` exactly.
    fn integrate_with(
        &mut self,
        s: f64,
        steps: i64,
        h_start: &TorusPoint,
        w0: &SpectralVorticity,
        path: &WienerPath,
        mut observe: impl FnMut(i64, f64, &TorusPoint, &SpectralVorticity, f64),
    ) -> Result<()> {
        let dt = self.config.dt;
        let j0 = grid_index(s, dt, "start time")?;
        let mut w = w0.clone();
        let mut enstrophy = 0.0;
        observe(0, s, h_start, &w, enstrophy);
        for j in 0..steps {
            let t = s + j as f64 * dt;
            let h = rotate(h_start, &self.force.frequency, j as f64 * dt);
            enstrophy += dt * w.sobolev_norm_sq(1.0);
            self.step(&mut w, &h, path, j0 + j, t)?;
            let h_next = rotate(h_start, &self.force.frequency, (j + 1) as f64 * dt);
            observe(j + 1, t + dt, &h_next, &w, enstrophy);
        }
        Ok(())
    }
}

/// Snap a time onto the step grid, refusing times that are not within
/// rounding distance of a grid point (noise increments are addressed by grid
/// index, so off-grid times would silently shift the path).
fn grid_index(x: f64, dt: f64, what: &str) -> Result<i64> {
    let j = (x / dt).round();
    if (j * dt - x).abs() > 1e-9 * x.abs().max(1.0) {
        return Err(CoreError::invalid(format!(
            "{what} {x} does not sit on the dt = {dt} grid"
        )));
    }
    Ok(j as i64)
}

/// Integrate over `[s, t]`, streaming every on-grid state to `observe` as
/// `(step, time, angle, field, running enstrophy integral)` without storing
/// the path. The initial state is reported first with step 0. Estimators that
/// only need running functionals of long trajectories use this to keep memory
/// flat in the step count.
pub fn simulate_observed(
    stepper: &mut Stepper,
    s: f64,
    t: f64,
    h_start: &TorusPoint,
    w0: &SpectralVorticity,
    path: &WienerPath,
    observe: impl FnMut(i64, f64, &TorusPoint, &SpectralVorticity, f64),
) -> Result<()> {
    let dt = stepper.config.dt;
    let steps = grid_index(t, dt, "end time")? - grid_index(s, dt, "start time")?;
    if steps < 0 {
        return Err(CoreError::invalid("end time precedes start time"));
    }
    stepper.integrate_with(s, steps, h_start, w0, path, observe)
}

/// Integrate over `[s, t]`, storing every `sample_every`-th state plus start
/// and end.
pub fn simulate(
    stepper: &mut Stepper,
    s: f64,
    t: f64,
    h_start: &TorusPoint,
    w0: &SpectralVorticity,
    path: &WienerPath,
    sample_every: usize,
) -> Result<Trajectory> {
    let dt = stepper.config.dt;
    let steps = grid_index(t, dt, "end time")? - grid_index(s, dt, "start time")?;
    if steps < 0 {
        return Err(CoreError::invalid("end time precedes start time"));
    }
    let every = sample_every.clamp(1, i64::MAX as usize) as i64;
    let mut samples = Vec::new();
    let mut enstrophy_integral = 0.0;
    stepper.integrate_with(s, steps, h_start, w0, path, |j, tj, h, w, enstrophy| {
        if j == 0 || j == steps || j % every == 0 {
            samples.push(Sample {
                t: tj,
                h: h.clone(),
                w: w.clone(),
            });
        }
        enstrophy_integral = enstrophy;
    })?;
    Ok(Trajectory {
        s,
        dt,
        h_start: h_start.clone(),
        samples,
        enstrophy_integral,
    })
}

/// Integrate and return the states at the requested grid times only. Times
/// must be sorted, distinct, and start at or after `s`.
pub fn run_sampled(
    stepper: &mut Stepper,
    s: f64,
    times: &[f64],
    h_start: &TorusPoint,
    w0: &SpectralVorticity,
    path: &WienerPath,
) -> Result<Vec<SpectralVorticity>> {
    let dt = stepper.config.dt;
    let j0 = grid_index(s, dt, "start time")?;
    let mut wanted = Vec::with_capacity(times.len());
    for &t in times {
        let j = grid_index(t, dt, "sample time")? - j0;
        if j < 0 {
            return Err(CoreError::invalid("sample time precedes start"));
        }
        if wanted.last().is_some_and(|&last| j <= last) {
            return Err(CoreError::invalid("sample times must be increasing"));
        }
        wanted.push(j);
    }
    let steps = *wanted.last().unwrap_or(&0);
    let mut out = Vec::with_capacity(times.len());
    let mut cursor = 0usize;
    stepper.integrate_with(s, steps, h_start, w0, path, |j, _, _, w, _| {
        if cursor < wanted.len() && j == wanted[cursor] {
            out.push(w.clone());
            cursor += 1;
        }
    })?;
    Ok(out)
}

/// Pullback start: integrate from `-t_back` to 0 with the symbol arranged so
/// the torus angle at time 0 is `h_at_zero`; returns the time-0 field.
pub fn simulate_pullback(
    stepper: &mut Stepper,
    t_back: f64,
    h_at_zero: &TorusPoint,
    w0: &SpectralVorticity,
    path: &WienerPath,
) -> Result<SpectralVorticity> {
    if t_back < 0.0 {
        return Err(CoreError::invalid("pullback depth must be nonnegative"));
    }
    let h_start = rotate(h_at_zero, &stepper.force.frequency, -t_back);
    let states = run_sampled(stepper, -t_back, &[0.0], &h_start, w0, path)?;
    Ok(states.into_iter().next().expect("one requested time"))
}

/// The auxiliary linear process: zero initial condition, no forcing, no
/// nonlinearity, same noise. Exact per-mode Ornstein-Uhlenbeck marginals.
pub fn ou_reference(
    config: &SimConfig,
    noise: &NoiseConfig,
    path: &WienerPath,
    s: f64,
    t: f64,
    sample_every: usize,
) -> Result<Trajectory> {
    let linear = SimConfig {
        nonlinearity: false,
        ..config.clone()
    };
    let force = QuasiPeriodicForce::zero(crate::forcing::Frequency::new(vec![0.0]));
    let mut stepper = Stepper::new(linear, force, noise.clone())?;
    let w0 = SpectralVorticity::zeros(&config.lattice);
    simulate(&mut stepper, s, t, &TorusPoint::origin(1), &w0, path, sample_every)
}

/// Evolve an ensemble over `[s, t]`, reading member `m`'s driving path from
/// trajectory id `id_base + m`, and return the states at the requested grid
/// times, outer index time, inner index member. Members run in parallel;
/// results are index-ordered and independent of the thread count.
pub fn evolve_ensemble_sampled(
    config: &SimConfig,
    force: &QuasiPeriodicForce,
    noise: &NoiseConfig,
    s: f64,
    times: &[f64],
    h_start: &TorusPoint,
    starts: &[SpectralVorticity],
    id_base: u64,
) -> Result<Vec<Vec<SpectralVorticity>>> {
    let per_member: Vec<Result<Vec<SpectralVorticity>>> = par_map_indexed(starts.len(), |m| {
        let mut stepper = Stepper::new(config.clone(), force.clone(), noise.clone())?;
        let path = WienerPath::new(noise.seed, id_base + m as u64);
        run_sampled(&mut stepper, s, times, h_start, &starts[m], &path)
    });
    let per_member: Vec<Vec<SpectralVorticity>> =
        per_member.into_iter().collect::<Result<_>>()?;
    let mut by_time = vec![Vec::with_capacity(starts.len()); times.len()];
    for member in per_member {
        for (ti, w) in member.into_iter().enumerate() {
            by_time[ti].push(w);
        }
    }
    Ok(by_time)
}

/// Pullback ensemble: member `m` integrates from `-t_back` to 0 under
/// trajectory id `id_base + m`; returns the time-0 fields.
pub fn pullback_ensemble(
    config: &SimConfig,
    force: &QuasiPeriodicForce,
    noise: &NoiseConfig,
    t_back: f64,
    h_at_zero: &TorusPoint,
    w0: &SpectralVorticity,
    count: usize,
    id_base: u64,
) -> Result<Vec<SpectralVorticity>> {
    let finals: Vec<Result<SpectralVorticity>> = par_map_indexed(count, |m| {
        let mut stepper = Stepper::new(config.clone(), force.clone(), noise.clone())?;
        let path = WienerPath::new(noise.seed, id_base + m as u64);
        simulate_pullback(&mut stepper, t_back, h_at_zero, w0, &path)
    });
    finals.into_iter().collect()
}

/// Knobs of the regularization probe: how hard the dynamics pulls arbitrary
/// starts into a smoothness ball.
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    /// Radius of the start ball in the plain norm.
    pub radius: f64,
    /// Thresholds for the first-order norm at the horizon.
    pub r1_grid: Vec<f64>,
    pub horizon: f64,
    /// Number of random start fields on the ball boundary.
    pub start_fields: u32,
    /// Torus grid resolution per component.
    pub angle_grid: u32,
    pub samples_per_start: u32,
    pub seed: u64,
}

/// One probe row: the worst-case probability over starts and angles that the
/// horizon state lands inside the first-order ball of radius `r1`.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeRow {
    pub r1: f64,
    pub min_probability: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub worst_start: u32,
    pub worst_angle: u32,
}

/// Monte Carlo lower estimate of the smoothing probability, minimized over a
/// grid of start fields and torus angles.
pub fn regularization_probe(
    config: &SimConfig,
    force: &QuasiPeriodicForce,
    noise: &NoiseConfig,
    probe: &ProbeConfig,
) -> Result<Vec<ProbeRow>> {
    if probe.start_fields == 0 || probe.angle_grid == 0 || probe.samples_per_start == 0 {
        return Err(CoreError::invalid("probe grids must be nonempty"));
    }
    let dim = force.frequency.dim();
    let angles: u64 = (probe.angle_grid as u64)
        .checked_pow(dim as u32)
        .filter(|&a| a <= 4096)
        .ok_or_else(|| CoreError::invalid("torus grid too fine for the probe"))?;
    let pairs = probe.start_fields as u64 * angles;
    let samples = probe.samples_per_start;

    // Success counts per (pair, threshold).
    let counts: Vec<Result<Vec<u64>>> = par_map_indexed(pairs as usize, |pair| {
        let start_idx = pair as u64 / angles;
        let angle_idx = pair as u64 % angles;
        let mut rng = rng::stream_rng(probe.seed, rng::tags::SCENARIO, start_idx, 0);
        let mut w0 = SpectralVorticity::random_gaussian(&config.lattice, &mut rng, 0.0);
        let norm = w0.norm();
        if norm > 0.0 {
            w0.scale(probe.radius / norm);
        }
        let h = angle_grid_point(angle_idx, probe.angle_grid, dim);
        let mut stepper = Stepper::new(config.clone(), force.clone(), noise.clone())?;
        let mut row = vec![0u64; probe.r1_grid.len()];
        for s_idx in 0..samples {
            let trajectory = pair as u64 * samples as u64 + s_idx as u64;
            let path = WienerPath::new(noise.seed, trajectory);
            let finals = run_sampled(&mut stepper, 0.0, &[probe.horizon], &h, &w0, &path)?;
            let norm1 = finals[0].sobolev_norm(1.0);
            for (ri, &r1) in probe.r1_grid.iter().enumerate() {
                if norm1 <= r1 {
                    row[ri] += 1;
                }
            }
        }
        Ok(row)
    });
    let counts: Vec<Vec<u64>> = counts.into_iter().collect::<Result<_>>()?;

    let trials = samples as u64;
    let mut rows = Vec::with_capacity(probe.r1_grid.len());
    for (ri, &r1) in probe.r1_grid.iter().enumerate() {
        let (pair, successes) = counts
            .iter()
            .enumerate()
            .map(|(p, row)| (p, row[ri]))
            .min_by_key(|&(_, c)| c)
            .expect("nonempty pair grid");
        let (wilson_lo, wilson_hi) = crate::fit::wilson_interval(successes, trials, 1.96);
        rows.push(ProbeRow {
            r1,
            min_probability: successes as f64 / trials as f64,
            wilson_lo,
            wilson_hi,
            worst_start: (pair as u64 / angles) as u32,
            worst_angle: (pair as u64 % angles) as u32,
        });
    }
    Ok(rows)
}

fn angle_grid_point(index: u64, per_dim: u32, dim: usize) -> TorusPoint {
    let mut rest = index;
    let mut components = Vec::with_capacity(dim);
    for _ in 0..dim {
        let i = rest % per_dim as u64;
        rest /= per_dim as u64;
        components.push(std::f64::consts::TAU * i as f64 / per_dim as f64);
    }
    TorusPoint::new(components)
}
