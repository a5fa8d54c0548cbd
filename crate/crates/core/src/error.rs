//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a precondition (bad shapes, ranks, partitions, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Workers disagreed about a collective, or a counterpart message never arrived.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A distributed transform plan could not be constructed.
    #[error("plan error: {0}")]
    Plan(String),

    /// A file did not conform to the chunked-tensor format.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// An object was used after it was consumed or in the wrong phase.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A numerically degenerate input (e.g. zero target norm in a relative loss).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A worker failed inside `launch`; peers were cancelled.
    #[error("worker {rank} failed: {message}")]
    Worker { rank: usize, message: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
