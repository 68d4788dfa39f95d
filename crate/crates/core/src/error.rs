use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite cost {cost} at training step {step}")]
    NonFiniteCost { step: usize, cost: f64 },

    #[error("lanczos did not converge after {iterations} iterations (max residual {max_residual:e})")]
    NotConverged {
        iterations: usize,
        max_residual: f64,
        partial: Box<crate::spectral::LanczosResult>,
    },

    #[error("matrix of order {order} exceeds the dense oracle guard of {limit}")]
    OracleGuard { order: usize, limit: usize },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is singular or indefinite (smallest eigenvalue {smallest:e})")]
    Singular { smallest: f64 },

    #[error("bundles do not match: {0}")]
    BundleMismatch(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("regression input has zero variance")]
    ZeroVariance,

    #[error("{path}: malformed data at byte offset {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input (bad config, missing files),
    /// as opposed to numerical or invariant failures.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Io { .. }
                | Error::Parse { .. }
                | Error::Format { .. }
                | Error::BundleMismatch(_)
                | Error::Dimension { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
