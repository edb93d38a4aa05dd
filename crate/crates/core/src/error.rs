//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KfError {
    /// A caller-supplied value violated an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A loss component became non-finite during training.
    #[error("training failure at step {step}: non-finite value in {component}")]
    TrainingFailure { component: String, step: usize },

    /// A factor network's CKN digest does not match the hub it is being
    /// registered into.
    #[error("incompatible factor: {0}")]
    IncompatibleFactor(String),

    /// A requested task or artifact does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// Checkpoint or dataset archive is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KfError>;

impl KfError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        KfError::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        KfError::ShapeMismatch(msg.into())
    }
}
