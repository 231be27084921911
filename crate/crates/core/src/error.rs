use std::path::PathBuf;

use handsplit_tape::TapeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tape(#[from] TapeError),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("step {step}: loss term `{term}` is not finite")]
    NonFinite { step: u64, term: &'static str },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("run `{name}` (seed {seed}): {source}")]
    Run { name: String, seed: u64, source: Box<Error> },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
