use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error("trajectory for user `{user_id}` has no valid records")]
    EmptyTrajectory { user_id: String },

    #[error("invalid bounding box: {0}")]
    InvalidBBox(String),

    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("metrics are undefined: {0}")]
    UndefinedMetrics(String),

    #[error("division by zero: target metric `{0}` is not strictly positive")]
    DivisionByZero(&'static str),

    #[error("invalid parameter spec: {0}")]
    InvalidSpec(String),

    #[error("invalid parameter vector: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("all {count} candidates of generation {generation} failed; {diagnostic}")]
    GenerationCollapse {
        generation: usize,
        count: usize,
        diagnostic: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("malformed {kind} file {path}: {message}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        message: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
