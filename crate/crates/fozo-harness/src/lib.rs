//! Experiment harness for the forward-only adaptation toolkit.
//!
//! Everything here is allowed to compute true gradients — source-model
//! pretraining, the finite-difference oracle, estimator diagnostics — and
//! none of it is reachable from the adaptation engine: the dependency points
//! strictly from this crate into `fozo`, never back.

pub mod backprop;
pub mod diagnostics;
pub mod experiment;
pub mod oracle;
pub mod pretrain;

/// Harness-level errors.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Fozo(#[from] fozo::FozoError),

    /// Pretraining stalled below the minimum usable accuracy.
    #[error("pretraining failure: held-out accuracy {accuracy:.4} below {required:.4} at step cap {cap}")]
    PretrainingFailure {
        accuracy: f64,
        required: f64,
        cap: usize,
    },

    #[error("oracle failure: non-finite loss at prompt coordinate ({row}, {col})")]
    OracleNonFinite { row: usize, col: usize },

    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
