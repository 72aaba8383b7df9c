//! Error types shared across the crate.

use thiserror::Error;

use crate::config::Violation;

#[derive(Debug, Error)]
pub enum EssenError {
    #[error("invalid config: {0:?}")]
    InvalidConfig(Vec<Violation>),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("no fusion configuration within 10% of target {target} (best distance {best_distance})")]
    NoSolution { target: u64, best_distance: u64 },

    #[error("non-finite value detected in tensor `{tensor}` (node {node})")]
    NonFinite { tensor: String, node: usize },

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("data generation error: {0}")]
    DataGen(String),

    #[error("manifest error at line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("model too large for gradient checking: {params} parameters exceeds cap {cap}")]
    GradCheckTooLarge { params: u64, cap: u64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EssenError>;
