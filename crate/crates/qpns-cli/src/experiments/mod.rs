//! One module per subcommand. Every runner takes the validated config and an
//! open output directory, writes its data files, and returns the overall
//! verdict; the caller turns that into the manifest and the exit code.

use std::sync::Arc;

use anyhow::Result;
use serde::Serialize;

use qpns_core::forcing::TorusPoint;
use qpns_core::rng::{self, stream_rng};
use qpns_core::spectral::{ModeLattice, SpectralVorticity};

use crate::config::RunConfig;
use crate::output::OutDir;

pub mod attractor;
pub mod diophantine;
pub mod hormander;
pub mod invariant;
pub mod lemmas;
pub mod limits;
pub mod lyapunov;
pub mod mixing;
pub mod simulate;

/// Trajectory-id windows, one per experiment, so no two estimators ever
/// share a noise stream. Within a window, each truncation gets a 10_000-wide
/// slice.
pub mod id_bases {
    pub const SIMULATE: u64 = 0;
    pub const INVARIANT: u64 = 1_000_000;
    pub const MIXING: u64 = 2_000_000;
    pub const SLLN: u64 = 3_000_000;
    pub const CLT: u64 = 4_000_000;
    pub const SIGMA: u64 = 5_000_000;
    pub const LYAPUNOV: u64 = 6_000_000;
    pub const ATTRACTOR: u64 = 7_000_000;
    pub const MEASURE_PATH: u64 = 8_000_000;

    /// Slice of a window reserved for one truncation index.
    pub fn slot(base: u64, truncation_index: usize) -> u64 {
        base + 10_000 * truncation_index as u64
    }
}

/// Common identity block at the head of every JSON summary.
#[derive(Debug, Clone, Serialize)]
pub struct Identity {
    pub experiment: String,
    pub config_hash: String,
    pub master_seed: u64,
}

impl Identity {
    pub fn new(experiment: &str, out: &OutDir, cfg: &RunConfig) -> Self {
        Identity {
            experiment: experiment.to_string(),
            config_hash: out.hash_hex().to_string(),
            master_seed: cfg.master_seed,
        }
    }
}

/// Deterministic auxiliary field: an isotropic Gaussian draw scaled to the
/// requested norm. `a`, `b` pick the scenario stream.
pub fn scenario_field(
    lattice: &Arc<ModeLattice>,
    master: u64,
    a: u64,
    b: u64,
    norm: f64,
) -> SpectralVorticity {
    let mut rng = stream_rng(master, rng::tags::SCENARIO, a, b);
    let mut w = SpectralVorticity::random_gaussian(lattice, &mut rng, 0.0);
    let current = w.norm();
    if current > 0.0 {
        w.scale(norm / current);
    }
    w
}

/// Uniform grid on the torus: `per_dim` points per angle dimension, in
/// lexicographic order.
pub fn torus_grid(dim: usize, per_dim: usize) -> Vec<TorusPoint> {
    let step = std::f64::consts::TAU / per_dim as f64;
    let total = per_dim.pow(dim as u32);
    let mut points = Vec::with_capacity(total);
    for mut index in 0..total {
        let mut components = Vec::with_capacity(dim);
        for _ in 0..dim {
            components.push((index % per_dim) as f64 * step);
            index /= per_dim;
        }
        points.push(TorusPoint::new(components));
    }
    points
}

/// Names the per-truncation file variants: `stem_n8.csv` and so on.
pub fn truncated_name(stem: &str, n: u32, ext: &str) -> String {
    format!("{stem}_n{n}.{ext}")
}

/// Shared verdict reduction: every listed truncation must pass.
pub fn all_pass<T>(rows: &[T], pass: impl Fn(&T) -> bool) -> bool {
    !rows.is_empty() && rows.iter().all(pass)
}

#[allow(unused_imports)]
pub use crate::output::fmt_f64;
