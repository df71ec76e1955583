use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the forecasting library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("probability vector sums to {sum} (expected 1 within {tolerance})")]
    BadProbabilitySum { sum: f64, tolerance: f64 },

    #[error("probability vector has invalid entry {value} at position {position}")]
    BadProbabilityEntry { position: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}

pub(crate) fn check_index(what: &'static str, index: usize, size: usize) -> Result<()> {
    if index < size {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange { what, index, size })
    }
}
