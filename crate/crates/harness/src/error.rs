use thiserror::Error;

/// Harness-level errors, classified for process exit codes: validation
/// problems exit 1, runtime faults exit 2.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("runtime fault: {0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) => 1,
            HarnessError::Runtime(_) => 2,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        HarnessError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        HarnessError::Runtime(msg.into())
    }
}

impl From<cef_core::Error> for HarnessError {
    fn from(e: cef_core::Error) -> Self {
        use cef_core::Error as E;
        match &e {
            E::ShapeMismatch { .. }
            | E::InvalidParameter(_)
            | E::EmptyInput(_)
            | E::MetadataMismatch(_) => HarnessError::Validation(e.to_string()),
            E::NonFinite(_)
            | E::SolverDiverged { .. }
            | E::SingularOperator(_)
            | E::TrainingFault(_) => HarnessError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Runtime(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Validation(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
