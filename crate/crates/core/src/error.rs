use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, arities, or layouts that do not fit together.
    #[error("structural error: {0}")]
    Structure(String),

    /// A numerical operation evaluated outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The requested paradigm cannot be built for this property.
    #[error("not applicable: {0}")]
    NotApplicable(String),

    /// Two bodies occupy the same point, so the pair direction is undefined.
    #[error("coincident particles {i} and {j} at step {step}")]
    Singularity { step: usize, i: usize, j: usize },

    #[error("training error: {0}")]
    Training(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn structure(msg: impl Into<String>) -> Self {
        Error::Structure(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
