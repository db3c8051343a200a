use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },

    #[error("{0}: no data rows")]
    EmptyFile(PathBuf),

    #[error("{path}: header {found:?} does not contain column {missing:?}")]
    HeaderMismatch {
        path: PathBuf,
        found: Vec<String>,
        missing: String,
    },

    #[error("degree of node {node} is {degree}, expected > 0")]
    DegenerateDegree { node: usize, degree: f64 },

    #[error("scene has {nodes} nodes, capacity is {capacity}")]
    CapacityExceeded { nodes: usize, capacity: usize },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss variable does not belong to this tape")]
    DetachedLoss,

    #[error("non-finite raw head output at step {step}, node {node}")]
    NonFiniteOutput { step: usize, node: usize },

    #[error("no scenes available for {0}")]
    DataEmpty(&'static str),

    #[error("checkpoint header {found:?} does not match {expected:?}")]
    CheckpointVersionMismatch { expected: String, found: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by the input data rather than numerics or IO.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MalformedRow { .. }
                | Error::EmptyFile(_)
                | Error::HeaderMismatch { .. }
                | Error::DataEmpty(_)
                | Error::CapacityExceeded { .. }
        )
    }

    pub fn is_numeric_error(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::NonFiniteOutput { .. } | Error::DegenerateDegree { .. }
        )
    }
}
