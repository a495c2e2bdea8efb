use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} values, found {found}")]
    Truncation { expected: usize, found: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("resource error: {0}")]
    Resource(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("degenerate sensing: {0}")]
    DegenerateSensing(String),

    #[error("unknown weight key `{0}`")]
    UnknownKey(String),

    #[error("shape mismatch for weight `{key}`: expected {expected:?}, found {found:?}")]
    WeightShape {
        key: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("weight file incomplete, missing: {}", .0.join(", "))]
    Incomplete(Vec<String>),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Coarse error class, used by front ends to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Numeric(_) | Error::Training { .. } => ErrorKind::Numeric,
            Error::Config(_) | Error::Contract(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}
