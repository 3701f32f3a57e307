use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown label: {0}")]
    UnknownLabel(String),
    #[error("cycle detected in taxonomy at `{0}`")]
    Cycle(String),
    #[error("orphan label `{child}`: parent `{parent}` is never attached to ROOT")]
    Orphan { child: String, parent: String },
    #[error("label `{child}` listed twice under `{parent}`")]
    DuplicateChild { child: String, parent: String },
    #[error("label `{0}` has more than one parent")]
    MultipleParents(String),
    #[error("malformed input at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("entity `{0}` has no embedding")]
    MissingEmbedding(String),
    #[error("non-finite {component} loss")]
    NonFinite { component: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
