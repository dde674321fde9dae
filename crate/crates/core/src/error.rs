use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of a formula.
    #[error("domain error: {0}")]
    Domain(String),
    /// Calls arrived out of their required order (e.g. decreasing slot time).
    #[error("sequencing error: {0}")]
    Sequencing(String),
    /// The peer sent something the protocol does not allow.
    #[error("protocol violation: {0}")]
    Protocol(String),
    /// Malformed bytes on the classical channel.
    #[error("wire format error: {0}")]
    Wire(String),
    #[error("transport timed out")]
    Timeout,
    #[error("transport closed by peer")]
    Closed,
    /// The block cannot yield key (failed confirmation, empty bounds, ...).
    #[error("block aborted: {0}")]
    Abort(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
