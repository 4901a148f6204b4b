//! Error type shared across the workspace.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("undefined input: {0}")]
    UndefinedInput(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged (non-finite loss) at task {task}, step {step}")]
    Divergence { task: usize, step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
