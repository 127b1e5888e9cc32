use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no root: {0}")]
    NoRoot(String),
    #[error("trajectory exploded at t = {time}")]
    Exploded { time: f64 },
    #[error("divergent integral: {0}")]
    Divergent(String),
    #[error("MCMC acceptance rate {0:.4} is below 0.01 after adaptation")]
    LowAcceptance(f64),
    #[error("no convergence: {0}")]
    NonConvergence(String),
}

impl Error {
    /// True for failures of a numerical procedure, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        !matches!(self, Error::InvalidParameter(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
