//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A point or time lies outside the region where a quantity is defined.
    #[error("domain error: {0}")]
    Domain(String),
    /// Malformed arguments (empty sample sets, degenerate boxes, bad grids).
    #[error("argument error: {0}")]
    Argument(String),
    /// The structural hypotheses of an estimate are violated (e.g. E ≥ E₀).
    #[error("hypothesis violation: {0}")]
    Hypothesis(String),
    /// No trial value of d made every margin nonnegative.
    #[error("calibration failed: {message} (worst margin {worst_margin:e})")]
    Calibration { message: String, worst_margin: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn hypothesis(msg: impl Into<String>) -> Self {
        Error::Hypothesis(msg.into())
    }
}
