use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum CcmError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    /// A certified quantity failed its certificate at a concrete point
    /// (indefinite metric, empty control half-space, ...).
    #[error("certification violation: {0}")]
    CertificationViolation(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CcmError>;
