//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Reasons a wire message or checkpoint failed to decode.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic bytes {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("truncated input: needed {needed} bytes, had {available}")]
    Truncated { needed: usize, available: usize },
    #[error("crc mismatch: header says {expected:#010x}, payload hashes to {actual:#010x}")]
    CrcMismatch { expected: u32, actual: u32 },
    #[error("unknown message type {0}")]
    UnknownMessageType(u8),
    #[error("unexpected message type: wanted {wanted}, got {got}")]
    WrongMessageType { wanted: &'static str, got: &'static str },
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("collision: gap to lead vehicle is {gap_m:.3} m")]
    Collision { gap_m: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("route synthesis failed: {0}")]
    Synthesis(String),

    #[error("replay buffer holds {have} transitions, need {need}")]
    Underfull { have: usize, need: usize },

    #[error("optimization diverged: {0}")]
    Diverged(String),

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("decode error: {0}")]
    Decode(#[from] DecodeError),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("agent {agent} cycle {cycle}: {source}")]
    Context {
        agent: usize,
        cycle: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn with_context(self, agent: usize, cycle: u64) -> Self {
        Error::Context {
            agent,
            cycle,
            source: Box::new(self),
        }
    }
}
