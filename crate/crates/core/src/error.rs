use thiserror::Error;

#[derive(Debug, Error)]
pub enum MgqdaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("group {group} has {count} observation(s); at least 2 are required")]
    InsufficientGroupSize { group: usize, count: usize },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("covariance construction failed: {0}")]
    Construction(String),

    #[error("eigensolver did not converge")]
    NoConvergence,

    #[error("cross-validation: {0}")]
    Folds(String),

    #[error("model format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MgqdaError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MgqdaError::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, MgqdaError>;
