//! Error type shared by every layer of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OdesError>;

#[derive(Debug, Error)]
pub enum OdesError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("plaintext {value} exceeds bound {bound}")]
    BoundExceeded { value: i64, bound: i64 },

    #[error("share vector has {got} shares, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },

    #[error("missing delta for server {0}")]
    MissingDelta(u16),

    #[error("delta round mismatch: saw rounds {first} and {other}")]
    RoundMismatch { first: u64, other: u64 },

    #[error("rank {rank} out of bounds for {len} records")]
    RankOutOfBounds { rank: u64, len: u64 },

    #[error("duplicate record id {0}")]
    DuplicateRid(u64),

    #[error("unknown record id {0}")]
    UnknownRid(u64),

    #[error("malformed index file: {0}")]
    MalformedIndexFile(String),

    #[error("corrupt state file: {0}")]
    CorruptStateFile(String),

    #[error("malformed message: {0}")]
    MalformedMessage(String),

    #[error("unknown recipient {0}")]
    UnknownRecipient(u16),

    #[error("connection lost: {0}")]
    ConnectionLost(String),

    #[error("protocol timeout: {0}")]
    ProtocolTimeout(String),

    #[error("incomplete delta round {round}: have {have} of {want}")]
    IncompleteRound {
        round: u64,
        have: usize,
        want: usize,
    },

    #[error("replica divergence: {0}")]
    ReplicaDivergence(String),

    #[error("incomplete responses: {0}")]
    IncompleteResponses(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl OdesError {
    /// Process exit code for the CLI: 1 usage, 2 protocol, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        use OdesError::*;
        match self {
            Config(_) | BoundExceeded { .. } | RankOutOfBounds { .. } => 1,
            Io(_) | MalformedIndexFile(_) | CorruptStateFile(_) => 3,
            _ => 2,
        }
    }
}
