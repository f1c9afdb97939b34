//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, fitting and prediction.
#[derive(Debug, Error)]
pub enum GpError {
    /// Input shapes or values do not match what an operation expects.
    #[error("input error: {0}")]
    Input(String),

    /// A spec violates one of its invariants (non-positive scale, bad index, ...).
    #[error("validation error [{code}]: {message}")]
    Validation { code: &'static str, message: String },

    /// A covariance (or related) matrix could not be factorized even after
    /// jitter escalation.
    #[error("factorization failed: {0}")]
    Factorization(String),

    /// An iterative scheme (Newton, EP, optimizer) did not converge.
    #[error("did not converge: {0}")]
    NoConvergence(String),

    /// Numerical breakdown that is not a factorization failure, e.g. a
    /// negative cavity variance in EP.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// The requested operation is not supported for this model configuration.
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl GpError {
    pub fn input(msg: impl Into<String>) -> Self {
        GpError::Input(msg.into())
    }

    pub fn validation(code: &'static str, msg: impl Into<String>) -> Self {
        GpError::Validation { code, message: msg.into() }
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        GpError::Numerical(msg.into())
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        GpError::Unsupported(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, GpError>;
