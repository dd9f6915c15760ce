//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("empirical measures must have equal sizes: {0} vs {1}")]
    SizeMismatch(usize, usize),

    #[error("iteration did not converge after {iters} iterations (residual {residual:.3e})")]
    NotConverged { iters: usize, residual: f64 },

    #[error("CFL condition violated: dt = {dt:.3e} exceeds limit {limit:.3e}")]
    CflViolation { dt: f64, limit: f64 },

    #[error("mass drift {drift:.3e} exceeds tolerance at t = {t:.4}")]
    MassDrift { drift: f64, t: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
