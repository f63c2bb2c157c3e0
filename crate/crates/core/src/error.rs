use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("anomaly class is ambiguous: classes {0:?} tie for the minority; set an explicit anomaly class")]
    AmbiguousMinority(Vec<i64>),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("graph has {nodes} nodes, above the dense eigendecomposition cap of {cap}")]
    TooLarge { nodes: usize, cap: usize },

    #[error("graph-level contrast needs at least 2 graphs in a batch, got {0}")]
    BatchTooSmall(usize),

    #[error("AUC needs both classes present")]
    SingleClass,

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
