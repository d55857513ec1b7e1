use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{source_name}:{line}: {reason}")]
    MalformedLine {
        source_name: String,
        line: usize,
        reason: String,
    },

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("input is empty")]
    EmptyInput,

    #[error("invalid prompt template: {0}")]
    InvalidTemplate(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown record id {0:?}")]
    UnknownRecord(String),

    #[error("record {record_id:?} has no {view} vector")]
    MissingView { record_id: String, view: String },

    #[error("selected set is empty")]
    EmptySelected,

    #[error("unselected pool is empty")]
    EmptyPool,

    #[error("pool holds {available} records but {requested} were requested")]
    InsufficientPool { requested: usize, available: usize },

    #[error("record {0:?} carries no hallucination label")]
    UnlabeledRecord(String),

    #[error("record {0:?} has a response identical to the rejection text")]
    DegeneratePair(String),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("unknown task {0:?}")]
    UnknownTask(String),

    #[error("task {record_id:?} is not leased by {annotator:?}")]
    NotLeased { record_id: String, annotator: String },

    #[error("invalid label {0}; expected 0 or 1")]
    InvalidLabel(i64),

    #[error("event log corrupt at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::InvalidConfig(_) | Error::InvalidTemplate(_) => ErrorClass::Usage,
            _ => ErrorClass::Data,
        }
    }
}
