use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the alignment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The principal matrix logarithm does not exist (eigenvalue on the
    /// closed negative real axis) or its iteration diverged.
    #[error("matrix logarithm undefined: {0}")]
    LogDomain(String),

    #[error("point maps to infinity (|w| = {w:e})")]
    PointAtInfinity { w: f64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported {kind} version {found:?}")]
    UnsupportedVersion { kind: &'static str, found: String },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::Validation(_)
            | Error::UnsupportedVersion { .. }
            | Error::Parse { .. } => 2,
            Error::LogDomain(_) | Error::PointAtInfinity { .. } | Error::Numerical(_) => 3,
            Error::Io { .. } => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
