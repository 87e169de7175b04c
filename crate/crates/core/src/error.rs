use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("address range {addr:#x}+{len} exceeds capacity {capacity:#x}")]
    Range { addr: u64, len: u64, capacity: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("address {addr:#x} is outside the data region of its page (offset {offset})")]
    Layout { addr: u64, offset: u64 },

    #[error("allocation error: {0}")]
    Alloc(String),

    #[error("pool {0} exhausted")]
    OutOfMemory(&'static str),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("transaction {txn} is {state}, expected {expected}")]
    State {
        txn: u64,
        state: &'static str,
        expected: &'static str,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("recovery failed: {0}")]
    Recovery(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
