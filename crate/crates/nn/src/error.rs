use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("parameter count mismatch: expected {expected}, got {got}")]
    ParamCount { expected: usize, got: usize },
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
