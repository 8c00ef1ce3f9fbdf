use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
///
/// The variants map one-to-one onto the CLI exit-code families: configuration and
/// usage problems, data problems, and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    /// A shape, attribute or architecture setting that cannot be built.
    #[error("configuration error: {0}")]
    Config(String),

    /// The architecture string or config text did not parse.
    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    /// Caller misuse, such as a non-scalar backward root.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed or inconsistent data on disk or in memory.
    #[error("data error{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Data { line: Option<usize>, msg: String },

    /// Loss or gradient went non-finite, or a numeric check failed.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data { line: None, msg: msg.into() }
    }

    pub fn data_at(line: usize, msg: impl Into<String>) -> Self {
        Error::Data { line: Some(line), msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for this error: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Usage(_) => 1,
            Error::Data { .. } | Error::Io { .. } => 2,
            Error::Numeric(_) => 3,
        }
    }
}
