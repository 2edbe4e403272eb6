use thiserror::Error;

use crate::dynamics::FlowTrace;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("matrix is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPd { min_eigenvalue: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("Gram matrix XX^T is singular (condition number {condition:e})")]
    SingularGram { condition: f64 },

    #[error("exact moment oracle envelope exceeded ({0}); use the Monte-Carlo estimator")]
    Envelope(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("gradient flow stalled at t = {time} (step size underflow)")]
    Stalled { time: f64, trace: Box<FlowTrace> },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
