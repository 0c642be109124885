//! Wire protocol for parameter exchange between the coordinator and clients,
//! with an in-process loopback carrier and a TCP carrier that move the same
//! encoded bytes.

pub mod frame;
pub mod link;
pub mod payload;
pub mod session;

use std::time::Duration;

use thiserror::Error;

use crate::schema::SchemaError;

pub use frame::{decode, encode, FrameDecoder, MsgType, WireMessage, FRAME_OVERHEAD, PROTOCOL_VERSION};
pub use link::{connect, loopback_pair, Direction, Link, LoopbackLink, RecordingLink, SocketServer, TcpLink, Transcript};
pub use payload::{ErrorPayload, GlobalPayload, Hello, RoundConfig, UpdatePayload};
pub use session::{Role, Session};

/// ERROR payload codes.
pub mod codes {
    pub const BAD_FRAME: u16 = 1;
    pub const VERSION: u16 = 2;
    pub const UNEXPECTED: u16 = 3;
    pub const BAD_PAYLOAD: u16 = 4;
    /// Local training failed for one round; the session stays open.
    pub const ROUND_FAILED: u16 = 5;
    pub const ABORTED: u16 = 6;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload length {0} exceeds limit")]
    PayloadTooLarge(u32),
    #[error("crc mismatch: frame says {expected:08x}, payload hashes to {actual:08x}")]
    CrcMismatch { expected: u32, actual: u32 },
    #[error("incomplete frame: {needed} bytes needed")]
    Incomplete { needed: usize },
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("unexpected {got} while {state}")]
    UnexpectedMessage { state: &'static str, got: MsgType },
}

impl ProtocolError {
    /// ERROR code reported to the peer for this failure.
    pub fn code(&self) -> u16 {
        match self {
            ProtocolError::UnsupportedVersion(_) => codes::VERSION,
            ProtocolError::UnexpectedMessage { .. } => codes::UNEXPECTED,
            ProtocolError::Malformed(_) => codes::BAD_PAYLOAD,
            _ => codes::BAD_FRAME,
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("peer closed the connection")]
    Closed,
    #[error("peer reported error {code}: {message}")]
    Remote { code: u16, message: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
}
