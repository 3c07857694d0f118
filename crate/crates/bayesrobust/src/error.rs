//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose shapes do not fit together.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A value fell outside the mathematical domain of an operation.
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A class label was out of range for the classifier.
    #[error("invalid class index {label} for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    /// `backward` was called on a non-scalar tensor.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// A second backward pass was attempted on an already-used tape.
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    /// The tensor is not attached to any tape.
    #[error("tensor is not attached to a tape")]
    Detached,

    /// Two tensors from different tapes were combined.
    #[error("{op}: operands belong to different tapes")]
    TapeMismatch { op: &'static str },

    /// A configuration or parameter value failed validation.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// An attack was handed an oracle below its required access level.
    #[error("oracle access too low: {0}")]
    OracleAccess(String),

    /// Dataset ingestion or generation failed.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Checkpoint or archive serialization failed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// An aggregate operation received no inputs.
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("plan file error: {0}")]
    Plan(String),
}

pub type Result<T> = std::result::Result<T, Error>;
