use thiserror::Error;

/// Errors produced by model construction, simulation, filtering and
/// density estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A simulated state left the admissible range. Carries enough context to
    /// distinguish physical unbounded growth from a numerical failure.
    #[error("state blow-up in sample {sample} at t = {t}: |component| = {magnitude:e} exceeds cap {cap:e}")]
    BlowUp {
        sample: usize,
        t: f64,
        magnitude: f64,
        cap: f64,
    },

    #[error("filter diverged in sample {sample} at t = {t}: non-finite posterior update")]
    FilterDiverged { sample: usize, t: f64 },

    #[error("observation noise covariance is singular at t = {t}")]
    SingularObservationNoise { t: f64 },

    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: &'static str },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
