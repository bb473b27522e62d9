use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("inconsistent class count at line {line}: expected {expected}, found {found}")]
    InconsistentClassCount {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("label not allowed for OOD_POOL (line {line})")]
    LabelNotAllowed { line: usize },

    #[error("missing label for {role} (line {line})")]
    MissingLabel { line: usize, role: String },

    #[error("record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },

    #[error("empty set")]
    EmptySet,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot fit {0}: no samples in that group")]
    EmptyGroup(&'static str),

    #[error("unknown method: {0}")]
    UnknownMethod(String),

    #[error("OOD count is zero (ratio {ratio} of {n_id} ID rows)")]
    ZeroOodCount { ratio: f64, n_id: usize },

    #[error("insufficient OOD pool: need {needed}, have {available}")]
    InsufficientPool { needed: usize, available: usize },

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("ensemble member {member}: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
