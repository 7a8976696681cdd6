//! Run configuration: the TOML schema, its validation, the canonical hash
//! embedded in every output, and the builders that turn schema values into
//! solver objects.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qpns_core::forcing::{
    DiophantineParams, ForceTerm, Frequency, NoiseConfig, QuasiPeriodicForce,
};
use qpns_core::integrator::SimConfig;
use qpns_core::spectral::{ModeLattice, SpectralVorticity};
use qpns_core::stats::{LyapunovConfig, Observable};
use qpns_core::transport::CostSpec;

/// Largest truncation radius a run file may request. Dense oracles and
/// desk-scale budgets stop being meaningful long before this.
const MAX_TRUNCATION: u32 = 64;

/// Relative slack when checking that a requested time sits on the step grid.
const GRID_SLACK: f64 = 1e-6;

/// Whole run file. Field order is the canonical serialization order, so it
/// is part of the hash contract; scalars stay ahead of tables because the
/// TOML serializer requires it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub lattice: LatticeSection,
    pub force: ForceSection,
    pub noise: NoiseSection,
    #[serde(default)]
    pub transport: TransportSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub invariant_measure: InvariantSection,
    #[serde(default)]
    pub mixing: MixingSection,
    #[serde(default)]
    pub slln: SllnSection,
    #[serde(default)]
    pub clt: CltSection,
    #[serde(default)]
    pub hormander: HormanderSection,
    #[serde(default)]
    pub attractor: AttractorSection,
    #[serde(default)]
    pub lyapunov: LyapunovSection,
    #[serde(default)]
    pub diophantine: DiophantineSection,
    #[serde(default)]
    pub lemmas: LemmasSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    /// Truncation radii the field experiments run at; qualitative claims are
    /// reported at every listed radius.
    pub truncations: Vec<u32>,
    pub nu: f64,
    pub dt: f64,
    #[serde(default = "default_true")]
    pub nonlinearity: bool,
}

/// Torus frequency: a named preset or explicit components.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrequencySpec {
    Named(String),
    Components(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceSection {
    pub frequency: FrequencySpec,
    /// Holder exponent the run claims for the symbol; any value in (0, 1]
    /// is valid for a finite Fourier series.
    #[serde(default = "default_one")]
    pub gamma: f64,
    #[serde(default)]
    pub terms: Vec<TermSpec>,
}

/// One Fourier line of the force in the torus angle.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub m: Vec<i64>,
    #[serde(default)]
    pub cos: Vec<ModeAmp>,
    #[serde(default)]
    pub sin: Vec<ModeAmp>,
}

/// One spatial harmonic with its amplitude.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeAmp {
    pub k: [i32; 2],
    pub amp: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// "canonical-four" for the degenerate four-direction set, "silent" for
    /// no stochastic forcing.
    pub kind: String,
    #[serde(default = "default_noise_amp")]
    pub amplitude: f64,
}

/// Cost function for transport distances: "plain" for the raw norm cost or
/// weighted parameters for the bounded comparison cost.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CostSpecToml {
    Named(String),
    Weighted { eta: f64, r: f64, nodes: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSection {
    pub cost: CostSpecToml,
}

impl Default for TransportSection {
    fn default() -> Self {
        TransportSection {
            cost: CostSpecToml::Named("plain".into()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub t: f64,
    pub sample_every: usize,
    /// "zero" or "random"; random starts are scaled to `w0_norm`.
    pub w0: String,
    pub w0_norm: f64,
    pub trajectory: u64,
    /// Also dump the sampled fields as binary snapshots.
    pub save_fields: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            t: 10.0,
            sample_every: 4,
            w0: "zero".into(),
            w0_norm: 1.0,
            trajectory: 0,
            save_fields: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvariantSection {
    /// Torus grid resolution per angle dimension.
    pub grid_per_dim: usize,
    pub t_back: f64,
    pub particles: usize,
    /// Transport distance the doubled-depth estimate may move.
    pub tolerance: f64,
    pub save_measures: bool,
}

impl Default for InvariantSection {
    fn default() -> Self {
        InvariantSection {
            grid_per_dim: 3,
            t_back: 8.0,
            particles: 24,
            tolerance: 0.5,
            save_measures: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingSection {
    pub times: Vec<f64>,
    pub members: usize,
    /// Distances at or below this are treated as sampling noise.
    pub floor: f64,
    /// Norm of the displaced starting point of the second ensemble.
    pub start_gap: f64,
    /// Goodness-of-fit gate on the synchronous decay curve.
    pub r2_min: f64,
}

impl Default for MixingSection {
    fn default() -> Self {
        MixingSection {
            times: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            members: 16,
            floor: 1e-3,
            start_gap: 1.0,
            r2_min: 0.9,
        }
    }
}

/// Observable selection shared by the limit-theorem sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableSpec {
    /// "energy", "mode-re", "mode-im", or "tanh-mode".
    pub kind: String,
    #[serde(default = "default_mode")]
    pub k: [i32; 2],
    #[serde(default = "default_obs_eta")]
    pub eta: f64,
    #[serde(default = "default_one")]
    pub scale: f64,
}

impl Default for ObservableSpec {
    fn default() -> Self {
        ObservableSpec {
            kind: "mode-re".into(),
            k: default_mode(),
            eta: default_obs_eta(),
            scale: 1.0,
        }
    }
}

/// Parameters of the measure estimate backing "path" centering and the
/// corrector variance route.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurePathSpec {
    pub grid_per_dim: usize,
    pub t_back: f64,
    pub particles: usize,
}

impl Default for MeasurePathSpec {
    fn default() -> Self {
        MeasurePathSpec {
            grid_per_dim: 3,
            t_back: 8.0,
            particles: 24,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SllnSection {
    pub horizons: Vec<f64>,
    pub members: usize,
    /// "none", "leave-one-out", or "path".
    pub centering: String,
    pub slope_lo: f64,
    pub slope_hi: f64,
    pub noise_floor: f64,
    #[serde(default)]
    pub observable: ObservableSpec,
    #[serde(default)]
    pub measure: MeasurePathSpec,
}

impl Default for SllnSection {
    fn default() -> Self {
        SllnSection {
            horizons: vec![10.0, 17.8, 31.6, 56.2, 100.0, 178.0, 316.2],
            members: 16,
            centering: "leave-one-out".into(),
            slope_lo: -0.65,
            slope_hi: -0.35,
            noise_floor: 1e-4,
            observable: ObservableSpec::default(),
            measure: MeasurePathSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CltSection {
    pub horizons: Vec<f64>,
    pub members: usize,
    pub centering: String,
    /// "direct" estimates the reference variance from an independent
    /// ensemble; "corrector" goes through the invariant-measure formula and
    /// needs the nonlinearity off.
    pub sigma_route: String,
    pub sigma_members: usize,
    pub ks_max: f64,
    /// Gate on the bounded comparison statistic when the reference variance
    /// is zero.
    pub gap_max: f64,
    #[serde(default)]
    pub observable: ObservableSpec,
    #[serde(default)]
    pub measure: MeasurePathSpec,
}

impl Default for CltSection {
    fn default() -> Self {
        CltSection {
            horizons: vec![5.0, 10.0, 20.0, 40.0],
            members: 600,
            centering: "leave-one-out".into(),
            sigma_route: "direct".into(),
            sigma_members: 600,
            ks_max: 0.08,
            gap_max: 0.08,
            observable: ObservableSpec::default(),
            measure: MeasurePathSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HormanderSection {
    /// Radii the bracket closure is checked at; independent of the lattice
    /// section because the claim is per-truncation algebra.
    pub truncations: Vec<u32>,
    pub max_generations: usize,
    pub amplitude: f64,
}

impl Default for HormanderSection {
    fn default() -> Self {
        HormanderSection {
            truncations: vec![3, 4],
            max_generations: 6,
            amplitude: 1.0,
        }
    }
}

/// Ladyzhenskaya constant: a fixed value or "estimate" for the sampled
/// lower-bound sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum C0Spec {
    Fixed(f64),
    Named(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttractorSection {
    pub c0: C0Spec,
    pub c0_samples: u32,
    pub eta_bar: f64,
    pub grid_per_dim: usize,
    pub trajectories: u64,
    pub base_depth: f64,
    pub doublings: usize,
    pub tolerance: f64,
    /// Depth and agreement tolerance of the start-independence check.
    pub start_depth: f64,
    pub start_tolerance: f64,
    /// Attraction probe: perturbation radius, ensemble size, settle lead,
    /// sample times, and direction ("forward" or "pullback").
    pub radius: f64,
    pub members: usize,
    pub settle: f64,
    pub times: Vec<f64>,
    pub direction: String,
    /// Moment order of the angle-regularity fit.
    pub holder_p: u32,
    /// Gate the verdict on the laminar-regime thresholds.
    pub require_gates: bool,
    /// Largest acceptable equilibrium defect in deterministic constant-force
    /// runs.
    pub residual_max: f64,
}

impl Default for AttractorSection {
    fn default() -> Self {
        AttractorSection {
            c0: C0Spec::Fixed(0.5),
            c0_samples: 200,
            eta_bar: 1.0,
            grid_per_dim: 8,
            trajectories: 2,
            base_depth: 4.0,
            doublings: 2,
            tolerance: 1e-3,
            start_depth: 16.0,
            start_tolerance: 1e-5,
            radius: 0.25,
            members: 4,
            settle: 8.0,
            times: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            direction: "forward".into(),
            holder_p: 1,
            require_gates: true,
            residual_max: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovSection {
    /// Growth parameter as a fraction of the admissible maximum; used
    /// directly when the noise is silent and the maximum is unbounded.
    pub eta_fraction: f64,
    pub kappa: f64,
    pub a: f64,
    pub c: f64,
    pub times: Vec<f64>,
    pub members: usize,
}

impl Default for LyapunovSection {
    fn default() -> Self {
        LyapunovSection {
            eta_fraction: 0.25,
            kappa: 1.0,
            a: 0.5,
            c: 2.0,
            times: vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0],
            members: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiophantineSection {
    /// Small-divisor constants of the claimed lower bound.
    pub k_check: f64,
    pub a_exponent: f64,
    pub kmax: u32,
    /// Also fit the effective exponent from record minima.
    pub fit: bool,
    pub birkhoff_lengths: Vec<u64>,
    pub birkhoff_slope_max: f64,
    pub birkhoff_floor: f64,
}

impl Default for DiophantineSection {
    fn default() -> Self {
        DiophantineSection {
            k_check: 0.38,
            a_exponent: 1.0,
            kmax: 100_000,
            fit: true,
            birkhoff_lengths: vec![10, 100, 1_000, 10_000],
            birkhoff_slope_max: -0.5,
            birkhoff_floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmasSection {
    pub draws: u32,
    pub p_max: u32,
    pub m_max: u32,
    pub multinomial_tolerance: f64,
    /// Tolerance of the closed-form equality case of the exponent bound.
    pub analytic_tolerance: f64,
}

impl Default for LemmasSection {
    fn default() -> Self {
        LemmasSection {
            draws: 10_000,
            p_max: 4,
            m_max: 20,
            multinomial_tolerance: 1e-9,
            analytic_tolerance: 1e-12,
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_one() -> f64 {
    1.0
}

fn default_noise_amp() -> f64 {
    0.05
}

fn default_mode() -> [i32; 2] {
    [1, 0]
}

fn default_obs_eta() -> f64 {
    0.05
}

impl RunConfig {
    /// Parse a run file; syntax and unknown-key errors surface here.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config file {}", path.display()))?;
        Ok(config)
    }

    /// Canonical serialization: the parsed value re-emitted in schema field
    /// order, independent of formatting and comments in the source file.
    pub fn canonical(&self) -> Result<String> {
        toml::to_string(self).context("cannot serialize config")
    }

    /// 64-bit digest of the canonical serialization; the identity stamped
    /// into every output file.
    pub fn hash(&self) -> Result<u64> {
        let digest = Sha256::digest(self.canonical()?.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        Ok(u64::from_be_bytes(bytes))
    }

    /// Consistency checks across sections; violations are configuration
    /// errors, reported before any computation starts.
    pub fn validate(&self) -> Result<()> {
        let lat = &self.lattice;
        if lat.truncations.is_empty() {
            bail!("lattice.truncations must list at least one radius");
        }
        for &n in &lat.truncations {
            if !(2..=MAX_TRUNCATION).contains(&n) {
                bail!("lattice truncation {n} outside the supported range 2..={MAX_TRUNCATION}");
            }
        }
        if lat.truncations.windows(2).any(|p| p[1] <= p[0]) {
            bail!("lattice.truncations must be strictly increasing");
        }
        if !(lat.nu > 0.0 && lat.nu.is_finite()) {
            bail!("lattice.nu must be positive and finite");
        }
        if !(lat.dt > 0.0 && lat.dt.is_finite()) {
            bail!("lattice.dt must be positive and finite");
        }

        let dim = self.frequency()?.dim();
        if self.force.gamma <= 0.0 || self.force.gamma > 1.0 {
            bail!("force.gamma must lie in (0, 1]");
        }
        let max_n = *lat.truncations.iter().min().expect("nonempty");
        for (i, term) in self.force.terms.iter().enumerate() {
            if term.m.len() != dim {
                bail!(
                    "force term {i} has wave vector dimension {}, frequency has {dim}",
                    term.m.len()
                );
            }
            for line in term.cos.iter().chain(&term.sin) {
                if line.k == [0, 0] {
                    bail!("force term {i} uses the zero spatial mode");
                }
                if line.k[0].unsigned_abs() > max_n || line.k[1].unsigned_abs() > max_n {
                    bail!(
                        "force term {i} mode ({}, {}) falls outside the smallest lattice N = {max_n}",
                        line.k[0],
                        line.k[1]
                    );
                }
                if !line.amp.is_finite() {
                    bail!("force term {i} has a nonfinite amplitude");
                }
            }
        }

        match self.noise.kind.as_str() {
            "canonical-four" => {
                if !(self.noise.amplitude > 0.0 && self.noise.amplitude.is_finite()) {
                    bail!("noise.amplitude must be positive and finite");
                }
            }
            "silent" => {}
            other => bail!("noise.kind {other:?} is not recognized (canonical-four, silent)"),
        }

        if let CostSpecToml::Named(name) = &self.transport.cost {
            if name != "plain" {
                bail!("transport.cost {name:?} is not recognized (plain, or eta/r/nodes table)");
            }
        }

        self.check_grid("simulate.t", &[self.simulate.t])?;
        match self.simulate.w0.as_str() {
            "zero" | "random" => {}
            other => bail!("simulate.w0 {other:?} is not recognized (zero, random)"),
        }
        self.check_grid("invariant_measure.t_back", &[self.invariant_measure.t_back])?;
        self.check_grid("mixing.times", &self.mixing.times)?;
        self.check_grid("slln.horizons", &self.slln.horizons)?;
        self.check_grid("clt.horizons", &self.clt.horizons)?;
        self.check_grid("lyapunov.times", &self.lyapunov.times)?;
        self.check_grid(
            "attractor depth grid",
            &[
                self.attractor.base_depth,
                self.attractor.start_depth,
                self.attractor.settle,
            ],
        )?;
        self.check_grid("attractor.times", &self.attractor.times)?;

        for (name, spec) in [
            ("slln.observable", &self.slln.observable),
            ("clt.observable", &self.clt.observable),
        ] {
            match spec.kind.as_str() {
                "energy" | "mode-re" | "mode-im" | "tanh-mode" => {}
                other => bail!(
                    "{name}.kind {other:?} is not recognized (energy, mode-re, mode-im, tanh-mode)"
                ),
            }
        }
        for (name, mode) in [
            ("slln.centering", &self.slln.centering),
            ("clt.centering", &self.clt.centering),
        ] {
            match mode.as_str() {
                "none" | "leave-one-out" | "path" => {}
                other => bail!("{name} {other:?} is not recognized (none, leave-one-out, path)"),
            }
        }
        match self.clt.sigma_route.as_str() {
            "direct" => {}
            "corrector" => {
                if self.lattice.nonlinearity {
                    bail!(
                        "clt.sigma_route = \"corrector\" uses the closed-form corrector and needs lattice.nonlinearity = false"
                    );
                }
                match self.clt.observable.kind.as_str() {
                    "mode-re" | "mode-im" => {}
                    other => bail!(
                        "clt.sigma_route = \"corrector\" needs a mode observable, got {other:?}"
                    ),
                }
            }
            other => bail!("clt.sigma_route {other:?} is not recognized (direct, corrector)"),
        }

        if self.hormander.truncations.is_empty() {
            bail!("hormander.truncations must list at least one radius");
        }
        for &n in &self.hormander.truncations {
            if !(2..=MAX_TRUNCATION).contains(&n) {
                bail!("hormander truncation {n} outside the supported range 2..={MAX_TRUNCATION}");
            }
        }

        match &self.attractor.c0 {
            C0Spec::Fixed(v) if *v > 0.0 && v.is_finite() => {}
            C0Spec::Fixed(v) => bail!("attractor.c0 = {v} must be positive and finite"),
            C0Spec::Named(name) if name == "estimate" => {}
            C0Spec::Named(name) => {
                bail!("attractor.c0 {name:?} is not recognized (a number, or \"estimate\")")
            }
        }
        match self.attractor.direction.as_str() {
            "forward" | "pullback" => {}
            other => bail!("attractor.direction {other:?} is not recognized (forward, pullback)"),
        }

        if self.diophantine.kmax < 100 {
            bail!("diophantine.kmax must be at least 100");
        }
        Ok(())
    }

    fn check_grid(&self, name: &str, times: &[f64]) -> Result<()> {
        let dt = self.lattice.dt;
        for &t in times {
            if !t.is_finite() {
                bail!("{name} contains a nonfinite time");
            }
            let ratio = t / dt;
            if (ratio - ratio.round()).abs() > GRID_SLACK * ratio.abs().max(1.0) {
                bail!("{name} value {t} is not a multiple of lattice.dt = {dt}");
            }
        }
        Ok(())
    }

    pub fn frequency(&self) -> Result<Frequency> {
        match &self.force.frequency {
            FrequencySpec::Named(name) => match name.as_str() {
                "golden" | "golden-mean" => Ok(Frequency::golden_mean()),
                other => bail!("force.frequency {other:?} is not recognized (golden, golden-mean)"),
            },
            FrequencySpec::Components(alpha) => {
                if alpha.is_empty() {
                    bail!("force.frequency components must be nonempty");
                }
                if alpha.iter().any(|a| !a.is_finite()) {
                    bail!("force.frequency components must be finite");
                }
                Ok(Frequency::new(alpha.clone()))
            }
        }
    }

    pub fn sim_config(&self, lattice: &Arc<ModeLattice>) -> Result<SimConfig> {
        SimConfig::new(
            self.lattice.nu,
            self.lattice.dt,
            Arc::clone(lattice),
            self.lattice.nonlinearity,
        )
        .context("lattice section rejected")
    }

    pub fn build_force(&self, lattice: &Arc<ModeLattice>) -> Result<QuasiPeriodicForce> {
        let frequency = self.frequency()?;
        let mut terms = Vec::with_capacity(self.force.terms.len());
        for term in &self.force.terms {
            let mut cos_amplitude = SpectralVorticity::zeros(lattice);
            for line in &term.cos {
                cos_amplitude.add_scaled(
                    &SpectralVorticity::harmonic_cos(lattice, line.k, line.amp),
                    1.0,
                );
            }
            let mut sin_amplitude = SpectralVorticity::zeros(lattice);
            for line in &term.sin {
                sin_amplitude.add_scaled(
                    &SpectralVorticity::harmonic_sin(lattice, line.k, line.amp),
                    1.0,
                );
            }
            terms.push(ForceTerm {
                m: term.m.clone(),
                cos_amplitude,
                sin_amplitude,
            });
        }
        QuasiPeriodicForce::new(frequency, terms, self.force.gamma).context("force section rejected")
    }

    pub fn build_noise(&self, lattice: &Arc<ModeLattice>) -> Result<NoiseConfig> {
        match self.noise.kind.as_str() {
            "canonical-four" => Ok(NoiseConfig::canonical_four(
                lattice,
                self.noise.amplitude,
                self.master_seed,
            )),
            "silent" => Ok(NoiseConfig::silent()),
            other => bail!("noise.kind {other:?} is not recognized"),
        }
    }

    pub fn cost_spec(&self) -> Result<CostSpec> {
        match &self.transport.cost {
            CostSpecToml::Named(_) => Ok(CostSpec::unweighted()),
            CostSpecToml::Weighted { eta, r, nodes } => {
                CostSpec::new(*eta, *r, *nodes).context("transport.cost rejected")
            }
        }
    }

    pub fn diophantine_params(&self) -> Result<DiophantineParams> {
        let dim = self.frequency()?.dim();
        DiophantineParams::new(self.diophantine.k_check, self.diophantine.a_exponent, dim)
            .context("diophantine section rejected")
    }

    pub fn lyapunov_params(&self, b0: f64) -> Result<LyapunovConfig> {
        let section = &self.lyapunov;
        if !(section.eta_fraction > 0.0 && section.eta_fraction.is_finite()) {
            bail!("lyapunov.eta_fraction must be positive and finite");
        }
        let probe = LyapunovConfig::new(1.0, section.kappa, section.a, section.c)
            .context("lyapunov section rejected")?;
        let eta_max = probe.eta_max(self.lattice.nu, b0);
        let eta = if eta_max.is_finite() {
            section.eta_fraction * eta_max
        } else {
            section.eta_fraction
        };
        LyapunovConfig::new(eta, section.kappa, section.a, section.c)
            .context("lyapunov section rejected")
    }
}

/// Build the observable a limit-theorem section asks for.
pub fn build_observable(spec: &ObservableSpec) -> Result<Observable> {
    let obs = match spec.kind.as_str() {
        "energy" => Observable::energy(spec.eta),
        "mode-re" => Observable::mode_re(spec.k, spec.eta),
        "mode-im" => Observable::mode_im(spec.k, spec.eta),
        "tanh-mode" => Observable::tanh_mode(spec.k, spec.scale, spec.eta),
        other => bail!("observable kind {other:?} is not recognized"),
    };
    obs.context("observable rejected")
}
