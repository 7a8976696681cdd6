use thiserror::Error;

/// Errors shared across the solver and harness modules.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("fields live on different lattices (N = {left} vs N = {right})")]
    LatticeMismatch { left: u32, right: u32 },

    #[error("solution blew up: non-finite coefficient at t = {time}")]
    BlowUp { time: f64 },

    #[error("weight exponent {exponent} exceeds safe range; lower eta or rescale the fields")]
    WeightOverflow { exponent: f64 },

    #[error("{count} particles exceed the exact-solver cap {cap}; use the entropic solver")]
    ParticleCap { count: usize, cap: usize },

    #[error("entropic solver failed to converge: marginal residual {residual}")]
    SinkhornDiverged { residual: f64 },

    #[error("kmax = {kmax} puts |k . alpha| beyond integer-exact float range; use a smaller kmax")]
    KmaxOverflow { kmax: i64 },

    #[error("degenerate fit: {detail}")]
    DegenerateFit { detail: String },

    #[error("estimator unstable: {detail}")]
    EstimatorUnstable { detail: String },

    #[error("invalid argument: {detail}")]
    InvalidArgument { detail: String },

    #[error("snapshot format error: {detail}")]
    Format { detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn invalid(detail: impl Into<String>) -> Self {
        CoreError::InvalidArgument {
            detail: detail.into(),
        }
    }
}
