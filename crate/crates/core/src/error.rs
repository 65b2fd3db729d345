use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("{path}: row {row} has {found} columns, expected {expected}")]
    RaggedRow { path: PathBuf, row: usize, expected: usize, found: usize },

    #[error("unsupported operation: {0}")]
    UnsupportedOperation(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("cannot stratify: class `{class}` has {count} sample(s), need at least 2")]
    Stratification { class: String, count: usize },

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("incompatible datasets: {0}")]
    IncompatibleDataset(String),

    #[error("architecture error between layer {from} and layer {to}: {reason}")]
    Architecture { from: usize, to: usize, reason: String },

    #[error("shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Divergence { epoch: usize, step: usize, reason: String },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{name} = {value} is out of range {range}")]
    OutOfRange { name: &'static str, value: f64, range: &'static str },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
