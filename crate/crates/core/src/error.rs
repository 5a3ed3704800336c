use std::io;

use thiserror::Error;

/// Errors raised by the swapping engine.
///
/// The variants are coarse on purpose: callers (the CLI in particular) map
/// them onto exit codes, so each variant corresponds to one failure class.
#[derive(Debug, Error)]
pub enum Error {
    /// Model dimensions or configuration are inconsistent.
    #[error("invalid specification: {0}")]
    Spec(String),

    /// Caller-supplied data is out of range or malformed.
    #[error("invalid input: {0}")]
    Input(String),

    /// A file or serialized blob does not follow the expected format.
    #[error("format error: {0}")]
    Format(String),

    /// The packed weight store could not be read or written.
    #[error("store error: {0}")]
    Store(String),

    /// The planner could not satisfy the memory budget.
    #[error("planning infeasible: {0}")]
    Planning(String),

    /// Accounted DRAM exceeded the plan's budget during decode.
    #[error("DRAM budget exceeded in group {group}: {resident} bytes resident > budget {budget}")]
    Budget { group: usize, resident: u64, budget: u64 },

    /// A worker thread died or a protocol message arrived out of order.
    #[error("runtime fault: {0}")]
    Runtime(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn store(msg: impl Into<String>) -> Self {
        Error::Store(msg.into())
    }
}
