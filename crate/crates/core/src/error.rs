use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("loss function is not deterministic (two evaluations differ: {0} vs {1})")]
    NonDeterministic(f64, f64),

    #[error("loss became non-finite at step {step} in phase {phase}: {loss}")]
    LossDiverged { step: u64, phase: String, loss: f64 },

    #[error("missing base checkpoint: {0}")]
    MissingBase(String),

    #[error(transparent)]
    Checkpoint(#[from] crate::harness::checkpoint::CheckpointError),

    #[error(transparent)]
    Prompt(#[from] crate::prompts::PromptError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
