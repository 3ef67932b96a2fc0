//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A per-entry missingness intensity left its admissible range.
    /// Columns are reported by 1-based name, worst offending value attached.
    #[error("mechanism infeasible at column {column}: lambda = {lambda} exceeds {limit}")]
    MechanismInfeasible {
        column: String,
        lambda: f64,
        limit: f64,
    },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("imputer fit failed at column {column}: {reason}")]
    ImputerFit { column: String, reason: String },

    /// The pair of masks handed to linked imputation was not nested.
    #[error("mask at the thinned scale is not a superset of the base mask at column {column}")]
    NotNested { column: String },

    #[error(
        "missingness support too large: {d_miss} maskable columns, enumeration capped at {cap}"
    )]
    EnumerationCap { d_miss: usize, cap: usize },

    #[error("iterate diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("linear system is singular or ill-conditioned: {0}")]
    Singular(String),

    #[error(
        "optimizer did not reach tolerance: gradient norm {grad_norm} after {iters} iterations"
    )]
    NoConvergence { grad_norm: f64, iters: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
