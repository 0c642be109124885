//! Frame layout (all integers little-endian):
//!
//! ```text
//! magic "UFPA" | version u16 | msg_type u8 | payload_len u32 | payload | crc32(payload) u32
//! ```

use std::fmt;

use super::ProtocolError;

pub const MAGIC: [u8; 4] = *b"UFPA";
pub const PROTOCOL_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 11;
pub const CRC_LEN: usize = 4;
/// Frame bytes beyond the payload.
pub const FRAME_OVERHEAD: usize = HEADER_LEN + CRC_LEN;
/// Upper bound on accepted payloads (1 GiB).
pub const MAX_PAYLOAD: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    RoundConfig = 2,
    Update = 3,
    Global = 4,
    Done = 5,
    Error = 6,
}

impl MsgType {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => MsgType::Hello,
            2 => MsgType::RoundConfig,
            3 => MsgType::Update,
            4 => MsgType::Global,
            5 => MsgType::Done,
            6 => MsgType::Error,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MsgType::Hello => "HELLO",
            MsgType::RoundConfig => "ROUND_CONFIG",
            MsgType::Update => "UPDATE",
            MsgType::Global => "GLOBAL",
            MsgType::Done => "DONE",
            MsgType::Error => "ERROR",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub version: u16,
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            msg_type,
            payload,
        }
    }

    pub fn frame_len(&self) -> usize {
        FRAME_OVERHEAD + self.payload.len()
    }
}

pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(msg.frame_len());
    encode_into(msg, &mut out);
    out
}

pub fn encode_into(msg: &WireMessage, out: &mut Vec<u8>) {
    let len = u32::try_from(msg.payload.len()).expect("payload exceeds u32 range");
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&msg.version.to_le_bytes());
    out.push(msg.msg_type.code());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&msg.payload);
    out.extend_from_slice(&crc32fast::hash(&msg.payload).to_le_bytes());
}

/// Decodes the frame at the start of `bytes`, returning it with the number
/// of bytes consumed. Never reads past the declared payload length.
pub fn decode(bytes: &[u8]) -> Result<(WireMessage, usize), ProtocolError> {
    let head = &bytes[..bytes.len().min(MAGIC.len())];
    if head != &MAGIC[..head.len()] {
        let mut got = [0u8; 4];
        got[..head.len()].copy_from_slice(head);
        return Err(ProtocolError::BadMagic(got));
    }
    if bytes.len() < HEADER_LEN {
        return Err(ProtocolError::Incomplete { needed: HEADER_LEN });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PROTOCOL_VERSION {
        return Err(ProtocolError::UnsupportedVersion(version));
    }
    let msg_type = MsgType::from_code(bytes[6]).ok_or(ProtocolError::UnknownType(bytes[6]))?;
    let len = u32::from_le_bytes([bytes[7], bytes[8], bytes[9], bytes[10]]);
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(len));
    }
    let total = FRAME_OVERHEAD + len as usize;
    if bytes.len() < total {
        return Err(ProtocolError::Incomplete { needed: total });
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + len as usize];
    let crc_at = HEADER_LEN + len as usize;
    let expected = u32::from_le_bytes([bytes[crc_at], bytes[crc_at + 1], bytes[crc_at + 2], bytes[crc_at + 3]]);
    let actual = crc32fast::hash(payload);
    if expected != actual {
        return Err(ProtocolError::CrcMismatch { expected, actual });
    }
    Ok((
        WireMessage {
            version,
            msg_type,
            payload: payload.to_vec(),
        },
        total,
    ))
}

/// Incremental decoder for byte streams; incomplete frames stay buffered.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete frame and its length, `Ok(None)` if more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<(WireMessage, usize)>, ProtocolError> {
        match decode(&self.buf) {
            Ok((msg, used)) => {
                self.buf.drain(..used);
                Ok(Some((msg, used)))
            }
            Err(ProtocolError::Incomplete { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout() {
        let msg = WireMessage::new(MsgType::Done, vec![0xAB]);
        let bytes = encode(&msg);
        assert_eq!(&bytes[..4], b"UFPA");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 5);
        assert_eq!(&bytes[7..11], &[1, 0, 0, 0]);
        assert_eq!(bytes[11], 0xAB);
        assert_eq!(&bytes[12..], &crc32fast::hash(&[0xAB]).to_le_bytes());
        assert_eq!(bytes.len(), msg.frame_len());
    }

    #[test]
    fn rejects_each_check() {
        let good = encode(&WireMessage::new(MsgType::Hello, b"abc".to_vec()));

        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(ProtocolError::BadMagic(_))));

        let mut version = good.clone();
        version[4] = 9;
        assert!(matches!(decode(&version), Err(ProtocolError::UnsupportedVersion(9))));

        let mut ty = good.clone();
        ty[6] = 42;
        assert!(matches!(decode(&ty), Err(ProtocolError::UnknownType(42))));

        let mut flipped = good.clone();
        flipped[HEADER_LEN + 1] ^= 0x01;
        assert!(matches!(decode(&flipped), Err(ProtocolError::CrcMismatch { .. })));

        let mut huge = good.clone();
        huge[7..11].copy_from_slice(&(MAX_PAYLOAD + 1).to_le_bytes());
        assert!(matches!(decode(&huge), Err(ProtocolError::PayloadTooLarge(_))));

        assert!(matches!(
            decode(&good[..good.len() - 1]),
            Err(ProtocolError::Incomplete { needed }) if needed == good.len()
        ));
        assert!(matches!(decode(&good[..3]), Err(ProtocolError::Incomplete { .. })));
    }

    #[test]
    fn stream_decoder_resumes() {
        let a = encode(&WireMessage::new(MsgType::Update, vec![1, 2, 3, 4, 5]));
        let b = encode(&WireMessage::new(MsgType::Done, vec![]));
        let stream: Vec<u8> = a.iter().chain(&b).copied().collect();
        let mut dec = FrameDecoder::new();
        let mut out = Vec::new();
        for chunk in stream.chunks(3) {
            dec.extend(chunk);
            while let Some((m, _)) = dec.next_frame().unwrap() {
                out.push(m.msg_type);
            }
        }
        assert_eq!(out, vec![MsgType::Update, MsgType::Done]);
        assert_eq!(dec.buffered(), 0);
    }

    proptest! {
        #[test]
        fn round_trip(code in 1u8..=6, payload in proptest::collection::vec(any::<u8>(), 0..256)) {
            let msg = WireMessage::new(MsgType::from_code(code).unwrap(), payload);
            let bytes = encode(&msg);
            let (back, used) = decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, msg);
        }

        #[test]
        fn fuzzed_input_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            if let Ok((msg, used)) = decode(&bytes) {
                prop_assert_eq!(used, msg.frame_len());
            }
        }

        #[test]
        fn corrupted_frames_fail_cleanly(payload in proptest::collection::vec(any::<u8>(), 1..64), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
            let mut bytes = encode(&WireMessage::new(MsgType::Update, payload));
            let i = pos.index(bytes.len());
            // the CRC covers the payload only; a flipped type byte can land on another valid type
            prop_assume!(i != 6);
            bytes[i] ^= 1 << bit;
            prop_assert!(decode(&bytes).is_err());
        }
    }
}
