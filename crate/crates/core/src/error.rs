use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("size mismatch in {what}: expected {expected}, found {found}")]
    SizeMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in record {record}")]
    NonFinite { record: usize },

    #[error("unknown class id {0}")]
    UnknownClass(u32),

    #[error("unknown record id {0}")]
    UnknownRecord(usize),

    #[error("record {record} is listed under class {listed} but belongs to class {actual}")]
    WrongClass { record: usize, listed: u32, actual: u32 },

    #[error("class table count for class {class} is {table}, but {actual} records carry it")]
    CountMismatch { class: u32, table: usize, actual: usize },

    #[error("zero vector where a direction is required")]
    ZeroVector,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("class {class} has {have} members, needs at least {need}")]
    ClassTooSmall { class: u32, have: usize, need: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("after filtering, {remaining} classes remain but {requested} were requested")]
    FilteredTooSmall { remaining: usize, requested: usize },

    #[error("could not place centers {required} apart; best minimum distance achieved was {achieved}")]
    Unsatisfiable { required: f64, achieved: f64 },

    #[error("sweep {key}={value}, repeat {repeat} failed")]
    Stage {
        key: String,
        value: f64,
        repeat: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
