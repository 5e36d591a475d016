use std::io;

use thiserror::Error;

/// Reason codes carried by a handshake rejection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RejectReason {
    DigestMismatch = 1,
    TapCountMismatch = 2,
    VersionMismatch = 3,
    Unsupported = 4,
}

impl RejectReason {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::DigestMismatch),
            2 => Some(Self::TapCountMismatch),
            3 => Some(Self::VersionMismatch),
            4 => Some(Self::Unsupported),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("payload too large: {0} bytes")]
    Size(usize),

    #[error("stream desynchronized: bad magic {0:02x?}")]
    Desync([u8; 4]),

    #[error("frame error: {0}")]
    Frame(String),

    #[error("handshake error: {0}")]
    Handshake(String),

    #[error("handshake rejected: {0:?}")]
    Rejected(RejectReason),

    #[error("timed out waiting for {0}")]
    Timeout(&'static str),

    #[error("transport closed")]
    Closed,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad configuration or input rather than a
    /// failure while running.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Input(_) | Error::Shape(_) | Error::Rejected(_)
        )
    }
}
