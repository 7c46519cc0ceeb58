use std::path::PathBuf;

use thiserror::Error;

use crate::scoretab::ScoreTableError;
use crate::uncertainty::UncertaintyError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Table(#[from] ScoreTableError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error("malformed policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("criterion cannot be met: {0}")]
    Unsatisfiable(String),
    #[error("insufficient observations: have {have}, need at least {need}")]
    InsufficientObservations { have: u64, need: u64 },
    #[error("policy file line {line}: {message}")]
    PolicyFile { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
