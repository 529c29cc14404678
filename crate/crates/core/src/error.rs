use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix that must be inverted is (numerically) rank deficient.
    #[error("rank deficient {context}: condition number {condition:e} exceeds cap")]
    RankDeficient { context: String, condition: f64 },

    /// A covariance matrix is not positive semi-definite (or not invertible where required).
    #[error("matrix is not positive semi-definite ({context}): min eigenvalue {min_eigenvalue:e}")]
    NonPsd { context: String, min_eigenvalue: f64 },

    /// Too few observations to estimate a per-cell quantity.
    #[error("degenerate design: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn rank(context: impl Into<String>, condition: f64) -> Self {
        Error::RankDeficient { context: context.into(), condition }
    }

    pub(crate) fn non_psd(context: impl Into<String>, min_eigenvalue: f64) -> Self {
        Error::NonPsd { context: context.into(), min_eigenvalue }
    }
}
