use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("all log-weights are -inf")]
    DegenerateWeights,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not symmetric positive-definite: {0}")]
    NotPositiveDefinite(String),

    #[error("scheme requires a positive diffusion coefficient, got {0}")]
    ZeroDiffusion(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at iteration {iteration} (horizon {horizon}): {detail}")]
    TrainingDiverged {
        iteration: usize,
        horizon: f64,
        detail: String,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetsError>;
