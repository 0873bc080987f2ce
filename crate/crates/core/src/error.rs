//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used by every fallible operation in the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid ply file: {0}")]
    Ply(String),

    #[error("ply file is big-endian; only ascii and binary_little_endian are supported")]
    PlyBigEndian,

    #[error("label property {0:?} not found in ply header")]
    LabelPropertyMissing(String),

    #[error("non-finite coordinate at vertex {index}")]
    NonFiniteCoordinate { index: usize },

    #[error("negative label {value} at vertex {index}")]
    NegativeLabel { index: usize, value: i64 },

    #[error("cloud has {points} points but {labels} labels")]
    LabelCountMismatch { points: usize, labels: usize },

    #[error("label {0} missing from class table")]
    LabelNotInTable(u32),

    #[error("label {0} is not covered by the mapping")]
    LabelNotMapped(u32),

    #[error("mapping targets are not contiguous from 0: {0:?}")]
    MappingNotContiguous(Vec<u32>),

    #[error("operation requires a non-empty cloud")]
    EmptyCloud,

    #[error("operation requires a labeled cloud")]
    UnlabeledCloud,

    #[error("{name} must be positive, got {value}")]
    NonPositiveParam { name: &'static str, value: f64 },

    #[error("grid resolution must be an even number >= 2, got {0}")]
    OddGridResolution(usize),

    #[error("voxel sizes must be positive and strictly increasing, got {0:?}")]
    BadScales(Vec<f64>),

    #[error("no labeled points available for sampling")]
    NoLabeledPoints,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}; sample ids {sample_ids:?}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        sample_ids: Vec<usize>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid grid dump: {0}")]
    GridDump(String),

    #[error("prediction/ground-truth length mismatch: {predictions} vs {ground_truth}")]
    EvalLengthMismatch {
        predictions: usize,
        ground_truth: usize,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
}
