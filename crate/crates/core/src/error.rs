use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("masked loss has no active positions")]
    EmptyMask,

    #[error("model: {0}")]
    Model(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("tokenizer: {0}")]
    Tokenize(String),

    #[error("trace: {0}")]
    Trace(String),

    #[error("unlearn: {0}")]
    Unlearn(String),

    #[error("eval: {0}")]
    Eval(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
