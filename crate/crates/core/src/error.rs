use thiserror::Error;

pub type Result<T, E = MolError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MolError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("fixed-point iteration diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("fixed-point iteration did not converge after {iterations} iterations (relative update {residual:e})")]
    FixedPointNotConverged { iterations: usize, residual: f64 },

    #[error("adjoint fixed-point iteration did not converge after {iterations} iterations (relative residual {residual:e})")]
    AdjointNotConverged { iterations: usize, residual: f64 },

    #[error("theory inapplicable: {0}")]
    TheoryInapplicable(String),

    #[error(transparent)]
    Dataset(#[from] crate::imaging::io::DatasetError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MolError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MolError::InvalidArgument(msg.into())
    }
}
