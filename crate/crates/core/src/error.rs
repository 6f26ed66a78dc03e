use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum StamError {
    #[error("malformed input at line {line}: {reason}")]
    MalformedInput { line: usize, reason: String },
    #[error("input contains no frames")]
    EmptyInput,
    #[error("format error: {0}")]
    Format(String),
    #[error("cannot save a sequence with zero frames")]
    EmptySequence,
    #[error("series has no observed values")]
    AllMissing,
    #[error("series is empty")]
    EmptySeries,
    #[error("degenerate pose: {0}")]
    DegeneratePose(String),
    #[error("sequence too short: need at least {needed} frames, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("zero degree at node {0}")]
    SingularDegree(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient for input {0}")]
    NonFiniteGradient(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("both classes required, only label {0} present")]
    SingleClass(u8),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = StamError> = std::result::Result<T, E>;

impl StamError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        StamError::ShapeMismatch(msg.into())
    }
}
