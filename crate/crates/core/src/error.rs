use std::path::PathBuf;

use thiserror::Error;

use crate::task::Feature;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("feature `{0}` is not mutable under the active policy")]
    ImmutableFeature(Feature),

    #[error("action on `{feature}` expects current value {expected}, found {found}")]
    FromValueMismatch {
        feature: Feature,
        expected: f64,
        found: f64,
    },

    #[error("{feature} = {value} is not on the allocation grid (nearest allowed value: {nearest})")]
    OffGrid {
        feature: Feature,
        value: f64,
        nearest: f64,
    },

    #[error("invalid value for `{feature}`: {value}")]
    InvalidValue { feature: Feature, value: f64 },

    #[error("invalid allocation grid: {0}")]
    InvalidGrid(String),

    #[error("invalid feature policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("trace file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("unknown trace format `{0}` (expected `ndjson` or `alibaba_csv`)")]
    UnknownFormat(String),

    #[error("all {rejected} rows were rejected")]
    AllRowsRejected { rejected: usize },

    #[error("task `{0}` has no deadline")]
    MissingDeadline(String),

    #[error("invalid deadline policy: {0}")]
    InvalidDeadlinePolicy(String),

    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),

    #[error("gini impurity of an empty node is undefined")]
    EmptyNode,

    #[error("training data contains a single class")]
    SingleClass,

    #[error("insufficient training data: need at least {needed} instances, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    #[error("feature vector has length {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("unsupported model version `{found}`")]
    VersionMismatch { found: String },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("model has no trees")]
    UntrainedModel,

    #[error("grid has {size} configurations, enumeration limit is {limit}")]
    GridTooLarge { size: usize, limit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
