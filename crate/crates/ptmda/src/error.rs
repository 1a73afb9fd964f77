//! Crate-wide error type and result alias.

use std::fmt;

/// Errors surfaced by the library. The CLI maps `Config`/`Data`/`Shape`/`Io`
/// to exit code 1 and `Numeric` to exit code 2.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape or dimension mismatch in a graph operation.
    Shape(String),
    /// Invalid configuration value or malformed config/CLI input.
    Config(String),
    /// Malformed dataset, CSV schema violation, or inconsistent domains.
    Data(String),
    /// Numerical failure: non-finite loss or gradient, degenerate statistic.
    Numeric(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Data(format!("json: {err}"))
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Data(format!("csv: {err}"))
    }
}
