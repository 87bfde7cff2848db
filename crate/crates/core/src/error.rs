use thiserror::Error;

/// Errors raised by the lab's numerical and geometric routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("index {index} out of range for {len} pixels")]
    Index { index: usize, len: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("trajectory diverged at step {step}")]
    Divergence { step: usize },

    #[error("lattice too coarse: renormalization correction {correction:.3e} exceeds 1e-6")]
    Resolution { correction: f64 },

    #[error("size limit exceeded: {0}")]
    Size(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("malformed file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
