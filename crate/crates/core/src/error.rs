use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("token out of vocabulary range: id {id} >= {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("degenerate distribution")]
    DegenerateDistribution,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot index empty memory")]
    EmptyMemory,
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("invalid distance: {0}")]
    InvalidDistance(f64),
    #[error("not a log-probability: {0}")]
    NotLogProbability(f64),
    #[error("numerical blowup in {0}")]
    NumericalBlowup(&'static str),
    #[error("zero-probability gold token")]
    ZeroProbabilityGold,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Coarse classification used to map errors onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Io,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_) | Error::CorruptSnapshot(_) => ErrorKind::Io,
            Error::DegenerateDistribution
            | Error::NumericalBlowup(_)
            | Error::ZeroProbabilityGold
            | Error::InvalidDistance(_)
            | Error::NotLogProbability(_) => ErrorKind::Numerical,
            _ => ErrorKind::Usage,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        Error::CorruptSnapshot(msg.into())
    }
}
