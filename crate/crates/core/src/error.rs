use thiserror::Error;

/// Errors surfaced by the forecasting core.
///
/// `Validation` variants mean the caller handed us something malformed;
/// `Numerical` variants mean a computation left the finite-float domain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}{context}")]
    ShapeMismatch {
        expected: String,
        got: String,
        context: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite state at solver level {level} (sigma={sigma})")]
    SolverDiverged { level: usize, sigma: f64 },

    #[error("singular operator: {0}")]
    SingularOperator(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("training fault: {0}")]
    TrainingFault(String),

    #[error("metadata mismatch:\n{0}")]
    MetadataMismatch(String),
}

impl Error {
    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
            context: String::new(),
        }
    }

    pub fn shape_in(context: &str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
            context: format!(" in {context}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
