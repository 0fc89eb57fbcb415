use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{0} contains no links")]
    EmptyDataset(PathBuf),

    #[error("dataset has {found} links, need at least {required}")]
    TooFewLinks { found: usize, required: usize },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("nearest and parametric samples overlap on link #{0}")]
    SampleOverlap(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("AUC needs at least one positive and one negative score of equal count (got {positives} and {negatives})")]
    AucInput { positives: usize, negatives: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("checkpoint node map does not match the dataset: {0}")]
    NodeMapMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("query not found: {0}")]
    QueryNotFound(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
