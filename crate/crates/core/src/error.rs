use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("feature index {index} out of range (d = {dim}) on line {line}")]
    Range { line: usize, index: usize, dim: usize },

    #[error("payload too large: {size} bytes exceeds item limit of {limit} bytes")]
    PayloadTooLarge { size: usize, limit: usize },

    #[error("invalid key {key:?}: {reason}")]
    InvalidKey { key: String, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("straggler timeout after {waited_s:.3}s waiting on {what}; missing ranks {missing:?}")]
    StragglerTimeout {
        what: String,
        missing: Vec<usize>,
        waited_s: f64,
    },

    #[error("numerical divergence (non-finite value) with learning rate {eta}")]
    Divergence { eta: f64 },

    #[error("parameter server channel error: {0}")]
    Channel(String),

    #[error("parameter server replied with error: {0}")]
    Server(String),

    #[error("worker {rank}: one iteration took {elapsed_s:.3}s, longer than the {lifetime_s}s lifetime limit")]
    IterationExceedsLifetime {
        rank: usize,
        elapsed_s: f64,
        lifetime_s: f64,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("epoch estimate failed: threshold not reached within {cap} epochs (best loss {best_loss})")]
    EstimateFailed { cap: usize, best_loss: f64 },

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("worker {rank} failed to launch: {message}")]
    Launch { rank: usize, message: String },

    #[error("job cancelled")]
    Cancelled,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
