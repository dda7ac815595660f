use thiserror::Error;

/// Errors produced by the odometry toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("input validation failed: {0}")]
    Validation(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("insufficient support: need {needed} positive weights, found {available}")]
    InsufficientSupport { needed: usize, available: usize },
    #[error("sampling failed in cell {cell}: {reason}")]
    SamplingFailure { cell: usize, reason: String },
    #[error("scene is invalid: {0}")]
    SceneValidity(String),
    #[error("solver failure: {0}")]
    SolverFailure(String),
    #[error("association failed: {0}")]
    Association(String),
    #[error("alignment failed: {0}")]
    Alignment(String),
    #[error("pipeline failure: {0}")]
    Pipeline(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad user input rather than a failing computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::Validation(_)
                | Error::Config(_)
                | Error::Parse { .. }
                | Error::SceneValidity(_)
                | Error::Domain(_)
        )
    }
}
