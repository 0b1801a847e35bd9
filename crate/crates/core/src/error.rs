use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("field evaluation failed")]
    FieldEvaluation,

    #[error("forward pass diverged")]
    ForwardDiverged,

    #[error("degenerate conditional at t = {0}")]
    DegenerateConditional(f64),

    #[error("flow-time out of open interval: t = {0}")]
    OpenInterval(f64),

    #[error("flow-time out of range [0, 1]: t = {0}")]
    TimeRange(f64),

    #[error("xt in negligible-density region")]
    NegligibleDensity,

    #[error("invalid mixture spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("sampler produced a non-finite state at step {step}")]
    SamplerDiverged { step: usize },

    #[error("not an IDX file")]
    NotIdx,

    #[error("size mismatch: expected {expected} bytes, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("model container: {0}")]
    Container(String),

    #[error("config: {0}")]
    Config(String),

    #[error("model not found: {}", .0.display())]
    ModelNotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
