//! Error type shared across the simulator core.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination.
    #[error("config: {0}")]
    Config(String),

    /// Malformed input file content.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Query outside the valid domain (time beyond a trace, unknown device, ...).
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// Internal bookkeeping contradiction (e.g. a meet event while already in contact).
    #[error("inconsistent state: {0}")]
    Inconsistent(String),

    /// A routing strategy returned an action outside the offered action set.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// Checkpoint file malformed or incompatible with the requested run.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { line, msg: msg.into() }
    }
}
