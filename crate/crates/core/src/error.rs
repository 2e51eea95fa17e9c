use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum LabError {
    /// Bad input: malformed arguments, precondition violations, mismatched shapes.
    #[error("validation error: {0}")]
    Validation(String),

    /// Attempt to mutate or differentiate a frozen policy.
    #[error("policy is frozen: {0}")]
    Frozen(String),

    /// An exact enumeration would exceed its budget.
    #[error("capacity exceeded: {what} needs {required} evaluations, budget is {budget}")]
    Capacity { what: String, required: u128, budget: u128 },

    /// An exponent left the guarded range.
    #[error("numerical range error at state {state:?}, action {action}: exponent {exponent}")]
    NumericalRange { state: Vec<u32>, action: u32, exponent: f64 },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    /// Inconsistent training configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Validation(msg.into()))
}
