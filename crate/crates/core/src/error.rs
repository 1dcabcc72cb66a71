use thiserror::Error;

/// Errors raised across the optimisation engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SboError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("numeric failure: {message} (condition estimate {condition:.3e})")]
    Numeric { message: String, condition: f64 },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("solver reported an infeasible program: {0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, SboError>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(SboError::Argument(msg.into()))
}
