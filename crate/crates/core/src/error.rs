use thiserror::Error;

pub type Result<T> = std::result::Result<T, QlmmError>;

#[derive(Debug, Error)]
pub enum QlmmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("matrix is not positive semidefinite: {0}")]
    NotPsd(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("coordinate {coordinate} is not identifiable: {reason}")]
    NotIdentifiable { coordinate: usize, reason: String },

    #[error("no residual degrees of freedom: {0}")]
    NoResidualDof(String),

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
