use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the separation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input too short: {len} samples, need at least {needed}")]
    InputTooShort { len: usize, needed: usize },

    #[error("degenerate demixing matrix at frequency bin {bin}")]
    DegenerateDemixing { bin: usize },

    #[error("singular matrix in {op} at frequency bin {bin}")]
    Singular { op: &'static str, bin: usize },

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid WAV file {path}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures of the numerical routines (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::DegenerateDemixing { .. } | Error::Singular { .. })
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Wav { .. } | Error::Malformed { .. } | Error::UnsupportedFormat(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
