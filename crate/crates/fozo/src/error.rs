//! Crate-wide error type.

/// Errors produced by the adaptation toolkit.
#[derive(Debug, thiserror::Error)]
pub enum FozoError {
    /// Shapes of tensor operands do not conform.
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value encountered: {context}")]
    NonFinite { context: String },

    /// Requested feature or parameter is not supported.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// An SPSA probe observed a non-finite loss on one of its two passes.
    #[error("probe failure: loss_plus={loss_plus}, loss_minus={loss_minus}")]
    ProbeFailure { loss_plus: f64, loss_minus: f64 },

    /// Internal contract violation (e.g. replayed perturbation shape drift).
    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FozoError>;

impl FozoError {
    pub(crate) fn shape(context: impl Into<String>) -> Self {
        FozoError::ShapeMismatch {
            context: context.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FozoError::InvalidArgument(msg.into())
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        FozoError::NonFinite {
            context: context.into(),
        }
    }
}
