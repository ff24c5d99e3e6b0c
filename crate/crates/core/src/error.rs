use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNormRow { row: usize },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("{path}: line {line}: expected {expected} values, found {found}")]
    RowLength {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}: header declares {declared} records but file holds {found}")]
    RecordCount {
        path: PathBuf,
        declared: usize,
        found: usize,
    },

    #[error("{path}: line {line}: cannot parse `{token}` as a real number")]
    BadNumber {
        path: PathBuf,
        line: usize,
        token: String,
    },

    #[error("duplicate pair id `{0}`")]
    DuplicateId(String),

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: String,
        expected: u32,
    },

    #[error("{path}: corrupt checkpoint: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user-supplied configuration rather than
    /// a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Manifest(_) | Error::InvalidArgument { .. })
    }
}
