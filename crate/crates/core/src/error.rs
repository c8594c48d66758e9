use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("sentence {id}: {reason}")]
    InvalidSentence { id: String, reason: String },
    #[error("sentence {id}: {reason}")]
    InvalidLabels { id: String, reason: String },
    #[error("sentence {id}, candidate {candidate}, token {token}: ill-formed BIO sequence")]
    IllFormedBio {
        id: String,
        candidate: usize,
        token: usize,
    },
    #[error("duplicate sentence id {0}")]
    DuplicateId(String),
    #[error("sentence {0} is not in the unlabeled pool")]
    NotInPool(String),
    #[error("no gold labels for sentence {0}; labels for it must come from the annotation service")]
    NoGoldLabels(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
