use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("weight {value} outside [-1, 1]; clip before sampling")]
    Unclipped { value: f32 },

    #[error("{layer}: backward called without caches from a matching forward pass")]
    MissingCache { layer: String },

    #[error("shift budget {requested:?} does not match the budget the cached input was quantized with ({cached:?})")]
    BudgetMismatch { requested: (u32, u32), cached: (u32, u32) },

    #[error("invalid shift budget: right={right}, left={left} (each must be <= 24)")]
    InvalidBudget { right: u32, left: u32 },

    #[error("batch normalization needs at least 2 examples per batch in training mode, got {0}")]
    BatchTooSmall(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("IDX parse error at byte offset {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("dataset has {available} examples, split needs {required}")]
    InsufficientExamples { available: usize, required: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value at step {step} in layer {layer}: {detail}")]
    NonFinite { step: usize, layer: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
