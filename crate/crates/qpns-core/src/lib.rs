//! Spectral solver and statistical harness for the stochastic vorticity
//! equation on the 2-torus with quasi-periodic deterministic forcing and
//! degenerate (finitely many Fourier directions) additive noise.
//!
//! The crate is organized around the pipeline
//!
//! ```text
//! spectral  -> truncated Fourier fields, Biot-Savart, advection term
//! forcing   -> torus rotation, quasi-periodic force, noise directions
//! integrator-> exponential Euler steps, two-sided Wiener paths, pullback runs
//! hormander -> symmetrized-bracket closure and rank saturation
//! transport -> weighted costs, exact/entropic optimal transport, mixing rates
//! stats     -> observables, corrector, martingale split, limit-theorem runs
//! attractor -> laminar thresholds, pullback solution, attraction tests
//! ```
//!
//! Everything downstream of `spectral` treats fields as immutable values, so
//! ensembles parallelize freely; all randomness is derived from explicit
//! counters so results never depend on thread schedule.

pub mod attractor;
pub mod fit;
pub mod forcing;
pub mod hormander;
pub mod integrator;
pub mod reduce;
pub mod rng;
pub mod snapshot;
pub mod spectral;
pub mod stats;
pub mod transport;

mod error;

pub use error::CoreError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;
