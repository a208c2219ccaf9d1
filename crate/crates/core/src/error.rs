use thiserror::Error;

use crate::model::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: {0}")]
    Invalid(ValidationReport),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("multipliers must be finite and nonnegative, got {0:?}")]
    NegativeMultiplier(Vec<f64>),

    /// `Υ_k` failed its positive definite factorization.
    #[error("Υ at stage {stage} is not positive definite")]
    NotPositiveDefinite { stage: usize },

    /// The steady-state Riccati iteration diverged or stalled, which is read as
    /// the system not being mean-square stabilizable at these weights.
    #[error("not mean-square stabilizable: {reason}")]
    NotStabilizable { reason: String },

    #[error("fixed-point iteration did not converge in {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("closed loop is not mean-square stable: per-step cost kept growing")]
    Diverging,

    #[error("thread pool: {0}")]
    ThreadPool(String),
}
