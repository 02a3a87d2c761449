use thiserror::Error;

use crate::diffcore::OpId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    OpShape {
        op: OpId,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("function is not deterministic: two forward passes gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("instance count mismatch: {left} vs {right}")]
    InstanceCount { left: usize, right: usize },

    #[error("non-finite loss component `{0}`")]
    NonFinite(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("count mismatch: {what} ({left} vs {right})")]
    CountMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },

    #[error("version mismatch: file has version {found}, reader supports {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
