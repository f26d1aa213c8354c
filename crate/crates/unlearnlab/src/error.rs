//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the unlearning laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or distribution shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A token id falls outside the vocabulary, or a word is unknown.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// An invalid hyperparameter or method/config mismatch.
    #[error("config error: {0}")]
    Config(String),

    /// Training diverged; `epoch`/`batch` locate the failing step.
    #[error("training error at epoch {epoch}, batch {batch}: {msg}")]
    Training {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    /// Corpus generation could not satisfy the request.
    #[error("generation error: {0}")]
    Generation(String),

    /// A numeric guard tripped (zero denominator, degenerate input).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A snapshot or dataset file is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
