//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("phrase not in bias list: {0:?}")]
    PhraseNotInBiasList(String),

    #[error("bad context index {index} (bias list has {len} phrases)")]
    BadContextIndex { index: usize, len: usize },

    #[error("empty bias list")]
    EmptyBiasList,

    #[error("empty phrase")]
    EmptyPhrase,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported coverage {0}% (expected one of 0, 25, 50, 75, 100)")]
    BadCoverage(u32),

    #[error("non-finite loss at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("corpus format error: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
