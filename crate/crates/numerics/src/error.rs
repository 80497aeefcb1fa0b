use thiserror::Error;

pub type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Error)]
pub enum NumericsError {
    /// Incompatible extents. `detail` names the offending axes.
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{op}: precondition violated: {detail}")]
    Precondition { op: &'static str, detail: String },

    /// Row-stochastic (or similar) input validation failed.
    #[error("{op}: invalid input: {detail}")]
    Validation { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward already ran on this tape; reset it before another backward pass")]
    DoubleBackward,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor format: {0}")]
    Format(String),

    #[error("tensor data corrupt: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NumericsError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        NumericsError::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn pre(op: &'static str, detail: impl Into<String>) -> Self {
        NumericsError::Precondition { op, detail: detail.into() }
    }
}
