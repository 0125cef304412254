use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset `{0}` is already registered")]
    DuplicateDataset(String),

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("invalid manifest `{name}`: {reason}")]
    InvalidManifest { name: String, reason: String },

    #[error("unknown item `{0}`")]
    UnknownItem(String),

    #[error("embedding file: {0}")]
    EmbeddingFormat(String),

    #[error("snapshot file: {0}")]
    SnapshotFormat(String),

    #[error("split too small: {0}")]
    SplitTooSmall(String),

    #[error("class `{class}` has {available} eligible items, need at least 2")]
    ClassTooSmall { class: String, available: usize },

    #[error("no internal hierarchy node has at least {min_leaves} leaf classes")]
    NoEligibleNode { min_leaves: usize },

    #[error("task {index}: {source}")]
    TaskSampling {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("method `{method}` is not supported by this backbone: {reason}")]
    UnsupportedMethod { method: String, reason: String },

    #[error("every configuration in the grid failed")]
    AllConfigsFailed,

    #[error("cross-validation infeasible: class `{class}` has a single support item")]
    CvInfeasible { class: String },

    #[error("statistic undefined: {0}")]
    Degenerate(String),

    #[error("config: {0}")]
    Config(String),

    #[error("store {path}: {reason}")]
    Store { path: PathBuf, reason: String },

    #[error("report: {0}")]
    Report(String),

    #[error("unpaired records: {0}")]
    UnpairedRecords(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
