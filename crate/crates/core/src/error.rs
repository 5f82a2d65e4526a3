use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LumError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{field} id {value} is outside its vocabulary of size {vocab}")]
    OutOfVocabulary {
        field: &'static str,
        value: usize,
        vocab: usize,
    },

    #[error("attention mask: {0}")]
    Mask(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training loss became {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = LumError> = std::result::Result<T, E>;
