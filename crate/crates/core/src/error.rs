//! Crate-wide error type.

use std::fmt;
use std::io;

/// Errors produced by index construction, search, and file I/O.
#[derive(Debug)]
pub enum Error {
    /// Underlying I/O failure.
    Io(io::Error),
    /// A file did not match the expected on-disk layout.
    Format(String),
    /// An argument violated a precondition.
    InvalidInput(String),
    /// Vector dimensionality did not match.
    DimensionMismatch { expected: usize, got: usize },
    /// Query metric does not match the metric the index was built with.
    MetricMismatch,
    /// A value fell outside the mathematical domain of an operation.
    Domain(String),
    /// Benchmark configuration could not be parsed or validated.
    Config(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io(e) => write!(f, "i/o error: {}", e),
            Error::Format(s) => write!(f, "malformed file: {}", s),
            Error::InvalidInput(s) => write!(f, "invalid input: {}", s),
            Error::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {}, got {}", expected, got)
            }
            Error::MetricMismatch => write!(f, "metric mismatch between query and index"),
            Error::Domain(s) => write!(f, "domain error: {}", s),
            Error::Config(s) => write!(f, "config error: {}", s),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
