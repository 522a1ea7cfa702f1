use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TmlpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TmlpError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{0}: file is empty")]
    EmptyInput(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("feature rows ({features}) do not match item count ({items})")]
    RowCount { features: usize, items: usize },

    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("node {index} out of bounds for graph with {num_nodes} nodes")]
    NodeIndex { index: usize, num_nodes: usize },

    #[error("graph node counts differ: {left} vs {right}")]
    NodeCount { left: usize, right: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TmlpError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TmlpError::Io {
            path: path.into(),
            source,
        }
    }
}
