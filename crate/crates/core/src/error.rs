use thiserror::Error;

use crate::lfd::SolverCertificate;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The program has no feasible point with a finite objective.
    #[error("infeasible problem: {constraint}")]
    Infeasible { constraint: String },

    /// A solver stopped without meeting its tolerance contract.
    #[error("numerical failure: {message}")]
    Numerical {
        message: String,
        certificate: Option<Box<SolverCertificate>>,
    },

    /// An API call made in a state that does not allow it.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("calibration failed: {0}")]
    Calibration(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical {
            message: msg.into(),
            certificate: None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
