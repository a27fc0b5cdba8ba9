use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("resource limit: {0}")]
    ResourceLimit(String),

    #[error("no convergence by t = {t}: last drift {drift:e}")]
    Timeout { t: f64, drift: f64 },

    #[error("steady state is degenerate (multiplicity > 1): {0}; integrate from a physical initial state instead")]
    DegenerateSteadyState(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
