use thiserror::Error;

/// Errors raised by the simulator core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("precomputed head is stale: built for {built}, state is {current}")]
    StaleHead { built: String, current: String },
    #[error("client {client} failed in round {round}: {reason}")]
    ClientFailed {
        round: usize,
        client: usize,
        reason: String,
    },
    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
