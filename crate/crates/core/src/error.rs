use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A network, task, schedule, or experiment configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller supplied an input with the wrong shape or an out-of-range value.
    #[error("input error: {0}")]
    Input(String),

    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A Gaussian density with zero standard deviation was requested.
    #[error("degenerate density: {0}")]
    Degenerate(String),

    /// A binary scorer returned unusable scores.
    #[error("scorer error: {0}")]
    Scorer(String),

    /// Correlation is undefined for a constant input.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    /// A training loop diverged or a step failed.
    #[error("training failed at step {step}: {source}")]
    Training {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    /// A checkpoint does not match the network or format it is loaded against.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// A persisted artifact could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Error {
        Error::Training {
            step,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
