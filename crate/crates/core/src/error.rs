use thiserror::Error;

/// Errors raised by the numerical routines and the command-line driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("convergence failure: {0}")]
    Convergence(String),
    #[error("integrator step failure: {0}")]
    StepFailure(String),
    #[error("invalid surface profile: {0}")]
    InvalidProfile(String),
    #[error("singular linear system: {0}")]
    SingularSolve(String),
    #[error("eigen-solver failure: {0}")]
    EigenSolver(String),
    #[error("certificate failure: {0}")]
    CertificateFailure(String),
    #[error("Newton failure: {0}")]
    NewtonFailure(String),
    #[error("inadmissible state: {0}")]
    Inadmissible(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
