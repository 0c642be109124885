//! Message payloads. Strings are UTF-8 prefixed by a u16 length; all
//! integers and floats are little-endian.
//!
//! UPDATE carries `client_id | round u32 | weight f64 | val_metric f64 |
//! mask u8 | block_count u32 | blocks | best_epoch u32 | pre_round_metric f64`,
//! where each block is `name | rank u8 | dims u32 x rank | f32 data`.

use std::sync::Arc;

use super::frame::{MsgType, WireMessage};
use super::ProtocolError;
use crate::params::{read_f32s, write_f32s, MaskedParams, SCALAR_BYTES};
use crate::schema::{ComponentMask, ModelSchema};
use crate::strategy::{AggRule, Strategy};

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }
    fn u16(&mut self, v: u16) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn f64(&mut self, v: f64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    fn str(&mut self, s: &str) -> &mut Self {
        let len = u16::try_from(s.len()).expect("string longer than u16::MAX bytes");
        self.u16(len);
        self.0.extend_from_slice(s.as_bytes());
        self
    }
    fn blocks(&mut self, params: &MaskedParams) -> &mut Self {
        let schema = params.schema();
        self.u8(params.mask().bits());
        self.u32(params.indices().len() as u32);
        for (&i, data) in params.indices().iter().zip(params.blocks()) {
            let spec = &schema.blocks()[i];
            self.str(&spec.name);
            self.u8(spec.shape.len() as u8);
            for &d in &spec.shape {
                self.u32(d as u32);
            }
            write_f32s(&mut self.0, data);
        }
        self
    }
}

struct Reader<'a> {
    rest: &'a [u8],
}

fn malformed(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::Malformed(msg.into())
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { rest: bytes }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ProtocolError> {
        if self.rest.len() < n {
            return Err(malformed(format!(
                "{what}: need {n} bytes, {} remain",
                self.rest.len()
            )));
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ProtocolError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64, ProtocolError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn str(&mut self, what: &str) -> Result<String, ProtocolError> {
        let len = self.u16(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| malformed(format!("{what}: invalid UTF-8")))
    }

    fn mask(&mut self) -> Result<ComponentMask, ProtocolError> {
        let bits = self.u8("mask")?;
        ComponentMask::from_bits(bits)
            .filter(|m| !m.is_empty())
            .ok_or_else(|| malformed(format!("invalid mask bits {bits:#04b}")))
    }

    /// Blocks must match the schema's masked blocks exactly, in order. Sizes
    /// are checked against the schema before any allocation.
    fn blocks(&mut self, schema: &Arc<ModelSchema>) -> Result<MaskedParams, ProtocolError> {
        let mask = self.mask()?;
        let indices = schema.masked_indices(mask);
        let count = self.u32("block count")? as usize;
        if count != indices.len() {
            return Err(malformed(format!(
                "mask {mask} selects {} blocks of `{}`, payload has {count}",
                indices.len(),
                schema.name()
            )));
        }
        let mut blocks = Vec::with_capacity(count);
        for &i in &indices {
            let spec = &schema.blocks()[i];
            let name = self.str("block name")?;
            if name != spec.name {
                return Err(malformed(format!("expected block `{}`, found `{name}`", spec.name)));
            }
            let rank = self.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(self.u32("dim")? as usize);
            }
            if dims != spec.shape {
                return Err(malformed(format!(
                    "block `{name}` has shape {dims:?}, schema says {:?}",
                    spec.shape
                )));
            }
            let data = self.take(spec.len() * SCALAR_BYTES, "block data")?;
            blocks.push(read_f32s(data));
        }
        MaskedParams::from_blocks(Arc::clone(schema), mask, blocks).map_err(|e| malformed(e.to_string()))
    }

    fn finish(self, what: &str) -> Result<(), ProtocolError> {
        if self.rest.is_empty() {
            Ok(())
        } else {
            Err(malformed(format!("{} trailing bytes after {what}", self.rest.len())))
        }
    }
}

fn expect_type(msg: &WireMessage, ty: MsgType) -> Result<(), ProtocolError> {
    if msg.msg_type == ty {
        Ok(())
    } else {
        Err(ProtocolError::UnexpectedMessage {
            state: "decoding payload",
            got: msg.msg_type,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub client_index: u32,
    pub client_id: String,
}

impl Hello {
    pub fn to_message(&self) -> WireMessage {
        let mut w = Writer::default();
        w.u32(self.client_index).str(&self.client_id);
        WireMessage::new(MsgType::Hello, w.0)
    }

    pub fn from_message(msg: &WireMessage) -> Result<Self, ProtocolError> {
        expect_type(msg, MsgType::Hello)?;
        let mut r = Reader::new(&msg.payload);
        let out = Self {
            client_index: r.u32("client index")?,
            client_id: r.str("client id")?,
        };
        r.finish("HELLO")?;
        Ok(out)
    }
}

/// Run schedule sent once per session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundConfig {
    pub rounds: u32,
    pub local_epochs: u32,
    pub batch_size: u32,
    pub patience: Option<u32>,
    pub seed: u64,
    pub strategy: Strategy,
    pub skip_final: bool,
}

impl RoundConfig {
    /// Whether the server aggregates and broadcasts after `round` (1-based).
    pub fn aggregates(&self, round: u32) -> bool {
        !(self.skip_final && round == self.rounds)
    }

    pub fn to_message(&self) -> WireMessage {
        let mut w = Writer::default();
        w.u32(self.rounds)
            .u32(self.local_epochs)
            .u32(self.batch_size)
            .u32(self.patience.unwrap_or(0))
            .u64(self.seed)
            .u8(self.strategy.components.bits())
            .u8(self.strategy.rule.code())
            .u8(u8::from(self.skip_final));
        WireMessage::new(MsgType::RoundConfig, w.0)
    }

    pub fn from_message(msg: &WireMessage) -> Result<Self, ProtocolError> {
        expect_type(msg, MsgType::RoundConfig)?;
        let mut r = Reader::new(&msg.payload);
        let rounds = r.u32("rounds")?;
        let local_epochs = r.u32("local epochs")?;
        let batch_size = r.u32("batch size")?;
        let patience = Some(r.u32("patience")?).filter(|&p| p > 0);
        let seed = r.u64("seed")?;
        let mask = r.mask()?;
        let rule_code = r.u8("rule")?;
        let rule = AggRule::from_code(rule_code).ok_or_else(|| malformed(format!("unknown rule {rule_code}")))?;
        let flags = r.u8("flags")?;
        if flags > 1 {
            return Err(malformed(format!("unknown flags {flags:#04x}")));
        }
        r.finish("ROUND_CONFIG")?;
        if rounds == 0 || local_epochs == 0 {
            return Err(malformed("rounds and local epochs must be positive"));
        }
        Ok(Self {
            rounds,
            local_epochs,
            batch_size,
            patience,
            seed,
            strategy: Strategy { components: mask, rule },
            skip_final: flags & 1 == 1,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdatePayload {
    pub client_id: String,
    pub round: u32,
    pub weight: f64,
    pub val_metric: f64,
    pub params: MaskedParams,
    /// Epoch (0-based) of the checkpoint that was sent.
    pub best_epoch: u32,
    /// Validation metric of the model the client started the round with.
    pub pre_round_metric: f64,
}

impl UpdatePayload {
    pub fn to_message(&self) -> WireMessage {
        let mut w = Writer::default();
        w.str(&self.client_id)
            .u32(self.round)
            .f64(self.weight)
            .f64(self.val_metric)
            .blocks(&self.params)
            .u32(self.best_epoch)
            .f64(self.pre_round_metric);
        WireMessage::new(MsgType::Update, w.0)
    }

    pub fn from_message(msg: &WireMessage, schema: &Arc<ModelSchema>) -> Result<Self, ProtocolError> {
        expect_type(msg, MsgType::Update)?;
        let mut r = Reader::new(&msg.payload);
        let out = Self {
            client_id: r.str("client id")?,
            round: r.u32("round")?,
            weight: r.f64("weight")?,
            val_metric: r.f64("val metric")?,
            params: r.blocks(schema)?,
            best_epoch: r.u32("best epoch")?,
            pre_round_metric: r.f64("pre-round metric")?,
        };
        r.finish("UPDATE")?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPayload {
    pub round: u32,
    pub params: MaskedParams,
}

impl GlobalPayload {
    pub fn to_message(&self) -> WireMessage {
        let mut w = Writer::default();
        w.u32(self.round).blocks(&self.params);
        WireMessage::new(MsgType::Global, w.0)
    }

    pub fn from_message(msg: &WireMessage, schema: &Arc<ModelSchema>) -> Result<Self, ProtocolError> {
        expect_type(msg, MsgType::Global)?;
        let mut r = Reader::new(&msg.payload);
        let out = Self {
            round: r.u32("round")?,
            params: r.blocks(schema)?,
        };
        r.finish("GLOBAL")?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorPayload {
    pub code: u16,
    pub message: String,
}

impl ErrorPayload {
    pub fn new(code: u16, message: impl Into<String>) -> Self {
        let mut message = message.into();
        if message.len() > u16::MAX as usize {
            let mut cut = u16::MAX as usize;
            while !message.is_char_boundary(cut) {
                cut -= 1;
            }
            message.truncate(cut);
        }
        Self { code, message }
    }

    pub fn to_message(&self) -> WireMessage {
        let mut w = Writer::default();
        w.u16(self.code).str(&self.message);
        WireMessage::new(MsgType::Error, w.0)
    }

    pub fn from_message(msg: &WireMessage) -> Result<Self, ProtocolError> {
        expect_type(msg, MsgType::Error)?;
        let mut r = Reader::new(&msg.payload);
        let out = Self {
            code: r.u16("error code")?,
            message: r.str("error message")?,
        };
        r.finish("ERROR")?;
        Ok(out)
    }
}

pub fn done_message() -> WireMessage {
    WireMessage::new(MsgType::Done, Vec::new())
}

/// Payload bytes spent on tensor data (`4 x` scalar count).
pub fn data_bytes(params: &MaskedParams) -> usize {
    params.scalar_count() * SCALAR_BYTES
}
