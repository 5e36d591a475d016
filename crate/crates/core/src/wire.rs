//! Length-prefixed framing for the device/server protocol.
//!
//! ```text
//! "MBLM" | version u16 | msg_type u8 | flags u8 | payload_len u32 | payload | crc32(payload) u32
//! ```
//!
//! All integers little-endian. Bit 0 of `flags` marks a frame the receiver
//! may skip if it does not know the message type.

use std::io::Read;

use crate::binio::LeWriter;
use crate::error::{Error, RejectReason, Result};
use crate::quant::{QuantScheme, QuantizedActivation};

pub const MAGIC: &[u8; 4] = b"MBLM";
pub const PROTOCOL_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 12;
pub const CRC_BYTES: usize = 4;
pub const MAX_PAYLOAD: usize = 1 << 31;
pub const FLAG_OPTIONAL: u8 = 1;

/// ActBatch payload bytes outside the taps: batch_id, label_count, tap_count.
pub const ACT_BATCH_FIXED_BYTES: usize = 8 + 4 + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    SessionAck = 2,
    ActBatch = 3,
    MetricsSnapshot = 4,
    CheckpointRequest = 5,
    CheckpointData = 6,
    Bye = 7,
    Reject = 8,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        use MsgType::*;
        Some(match v {
            1 => Hello,
            2 => SessionAck,
            3 => ActBatch,
            4 => MetricsSnapshot,
            5 => CheckpointRequest,
            6 => CheckpointData,
            7 => Bye,
            8 => Reject,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub protocol_version: u16,
    pub digest: u64,
    pub gamma: u16,
    pub scheme: QuantScheme,
    pub hidden: u32,
    pub classes: u16,
    pub embedding_tap: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireTap {
    pub block_index: u16,
    pub act: QuantizedActivation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActBatch {
    pub batch_id: u64,
    pub labels: Vec<u32>,
    pub taps: Vec<WireTap>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSnapshot {
    pub iterations: u64,
    pub last_batch_id: u64,
    pub loss: f32,
    pub acc: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    SessionAck { session_id: u64 },
    ActBatch(ActBatch),
    MetricsSnapshot(MetricsSnapshot),
    CheckpointRequest,
    CheckpointData(Vec<u8>),
    Bye,
    Reject(RejectReason),
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Hello(_) => MsgType::Hello,
            Message::SessionAck { .. } => MsgType::SessionAck,
            Message::ActBatch(_) => MsgType::ActBatch,
            Message::MetricsSnapshot(_) => MsgType::MetricsSnapshot,
            Message::CheckpointRequest => MsgType::CheckpointRequest,
            Message::CheckpointData(_) => MsgType::CheckpointData,
            Message::Bye => MsgType::Bye,
            Message::Reject(_) => MsgType::Reject,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut w = LeWriter::new(Vec::new());
        let put = |w: &mut LeWriter<Vec<u8>>| -> std::io::Result<()> {
            match self {
                Message::Hello(h) => {
                    w.u16(h.protocol_version)?;
                    w.u64(h.digest)?;
                    w.u16(h.gamma)?;
                    w.u8(h.scheme.to_u8())?;
                    w.u32(h.hidden)?;
                    w.u16(h.classes)?;
                    w.u8(u8::from(h.embedding_tap))
                }
                Message::SessionAck { session_id } => w.u64(*session_id),
                Message::ActBatch(b) => {
                    w.u64(b.batch_id)?;
                    w.u32(b.labels.len() as u32)?;
                    for &y in &b.labels {
                        w.u32(y)?;
                    }
                    w.u16(b.taps.len() as u16)?;
                    for t in &b.taps {
                        w.u16(t.block_index)?;
                        w.u8(t.act.scheme.to_u8())?;
                        for d in t.act.shape {
                            w.u32(d as u32)?;
                        }
                        w.f32(t.act.scale)?;
                        w.u32(t.act.codes.len() as u32)?;
                        w.bytes(&t.act.codes)?;
                    }
                    Ok(())
                }
                Message::MetricsSnapshot(m) => {
                    w.u64(m.iterations)?;
                    w.u64(m.last_batch_id)?;
                    w.f32(m.loss)?;
                    w.f32(m.acc)
                }
                Message::CheckpointRequest | Message::Bye => Ok(()),
                Message::CheckpointData(bytes) => w.bytes(bytes),
                Message::Reject(reason) => w.u8(*reason as u8),
            }
        };
        put(&mut w).expect("writing to a Vec cannot fail");
        w.into_inner()
    }
}

fn check_payload_len(n: usize) -> Result<()> {
    if n > MAX_PAYLOAD {
        return Err(Error::Size(n));
    }
    Ok(())
}

/// Frame a raw payload. Exposed so tests can forge frames of unknown types.
pub fn encode_frame(msg_type: u8, flags: u8, payload: &[u8]) -> Result<Vec<u8>> {
    check_payload_len(payload.len())?;
    let mut out = Vec::with_capacity(HEADER_BYTES + payload.len() + CRC_BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    out.push(msg_type);
    out.push(flags);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    Ok(out)
}

pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    encode_frame(msg.msg_type() as u8, 0, &msg.payload())
}

/// Encoded size of an ActBatch frame, computed without encoding it.
pub fn frame_len_act_batch(b: &ActBatch) -> usize {
    let taps: usize = b.taps.iter().map(|t| t.act.wire_bytes()).sum();
    HEADER_BYTES + ACT_BATCH_FIXED_BYTES + 4 * b.labels.len() + taps + CRC_BYTES
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "payload truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("take returns N bytes"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.arr()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.arr()?))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn finish(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(Error::Format(format!("{n} trailing payload bytes"))),
        }
    }
}

fn parse_act_batch(c: &mut Cursor) -> Result<ActBatch> {
    let batch_id = c.u64()?;
    let label_count = c.u32()? as usize;
    if label_count > c.remaining() / 4 {
        return Err(Error::Format(format!("label count {label_count} exceeds payload")));
    }
    let labels = (0..label_count).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let tap_count = c.u16()? as usize;
    let mut taps = Vec::with_capacity(tap_count.min(c.remaining()));
    for _ in 0..tap_count {
        let block_index = c.u16()?;
        let scheme = QuantScheme::from_u8(c.u8()?).map_err(|e| Error::Format(e.to_string()))?;
        let shape = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
        let scale = c.f32()?;
        let code_len = c.u32()? as usize;
        let codes = c.take(code_len)?.to_vec();
        let elements = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if elements.is_none() {
            return Err(Error::Format(format!("tap shape {shape:?} overflows")));
        }
        let act = QuantizedActivation { scheme, shape, scale, codes };
        act.validate()?;
        taps.push(WireTap { block_index, act });
    }
    Ok(ActBatch { batch_id, labels, taps })
}

fn parse_payload(kind: MsgType, payload: &[u8]) -> Result<Message> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let msg = match kind {
        MsgType::Hello => Message::Hello(Hello {
            protocol_version: c.u16()?,
            digest: c.u64()?,
            gamma: c.u16()?,
            scheme: QuantScheme::from_u8(c.u8()?).map_err(|e| Error::Format(e.to_string()))?,
            hidden: c.u32()?,
            classes: c.u16()?,
            embedding_tap: c.u8()? != 0,
        }),
        MsgType::SessionAck => Message::SessionAck { session_id: c.u64()? },
        MsgType::ActBatch => Message::ActBatch(parse_act_batch(&mut c)?),
        MsgType::MetricsSnapshot => Message::MetricsSnapshot(MetricsSnapshot {
            iterations: c.u64()?,
            last_batch_id: c.u64()?,
            loss: c.f32()?,
            acc: c.f32()?,
        }),
        MsgType::CheckpointRequest => Message::CheckpointRequest,
        MsgType::CheckpointData => Message::CheckpointData(c.take(payload.len())?.to_vec()),
        MsgType::Bye => Message::Bye,
        MsgType::Reject => {
            let code = c.u8()?;
            Message::Reject(
                RejectReason::from_u8(code)
                    .ok_or_else(|| Error::Format(format!("unknown reject reason {code}")))?,
            )
        }
    };
    c.finish()?;
    Ok(msg)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    /// The buffer holds only part of a frame.
    NeedMore,
    /// A message and the number of bytes its frame occupied.
    Message(Message, usize),
    /// An optional frame of unknown type was skipped.
    Skipped { msg_type: u8, consumed: usize },
}

/// Decode the first frame in `buf`.
pub fn decode(buf: &[u8]) -> Result<Decoded> {
    let probe = buf.len().min(4);
    if buf[..probe] != MAGIC[..probe] {
        let mut got = [0u8; 4];
        got[..probe].copy_from_slice(&buf[..probe]);
        return Err(Error::Desync(got));
    }
    if buf.len() < HEADER_BYTES {
        return Ok(Decoded::NeedMore);
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != PROTOCOL_VERSION {
        return Err(Error::Protocol(format!("unsupported frame version {version}")));
    }
    let (msg_type, flags) = (buf[6], buf[7]);
    let len = u32::from_le_bytes([buf[8], buf[9], buf[10], buf[11]]) as usize;
    check_payload_len(len)?;
    let total = HEADER_BYTES + len + CRC_BYTES;
    if buf.len() < total {
        return Ok(Decoded::NeedMore);
    }
    let payload = &buf[HEADER_BYTES..HEADER_BYTES + len];
    let crc = u32::from_le_bytes(buf[total - 4..total].try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != crc {
        return Err(Error::Frame(format!("crc mismatch on a {len}-byte payload")));
    }
    match MsgType::from_u8(msg_type) {
        Some(kind) => Ok(Decoded::Message(parse_payload(kind, payload)?, total)),
        None if flags & FLAG_OPTIONAL != 0 => Ok(Decoded::Skipped { msg_type, consumed: total }),
        None => Err(Error::Protocol(format!("unknown message type {msg_type}"))),
    }
}

/// Pulls whole messages off a byte stream.
pub struct FrameReader<R> {
    inner: R,
    buf: Vec<u8>,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, buf: Vec::new() }
    }

    /// Next message with its frame size, or `None` on a clean end of stream.
    pub fn next_message(&mut self) -> Result<Option<(Message, usize)>> {
        let mut chunk = vec![0u8; 64 * 1024];
        loop {
            if !self.buf.is_empty() {
                match decode(&self.buf)? {
                    Decoded::Message(msg, n) => {
                        self.buf.drain(..n);
                        return Ok(Some((msg, n)));
                    }
                    Decoded::Skipped { msg_type, consumed } => {
                        log::warn!("skipping optional frame of unknown type {msg_type}");
                        self.buf.drain(..consumed);
                        continue;
                    }
                    Decoded::NeedMore => {}
                }
            }
            let n = self.inner.read(&mut chunk)?;
            if n == 0 {
                return match self.buf.len() {
                    0 => Ok(None),
                    k => Err(Error::Frame(format!("stream ended {k} bytes into a frame"))),
                };
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }
}

/// Decode a complete byte stream into messages.
pub fn decode_all(bytes: &[u8]) -> Result<Vec<Message>> {
    let mut reader = FrameReader::new(bytes);
    let mut out = Vec::new();
    while let Some((m, _)) = reader.next_message()? {
        out.push(m);
    }
    Ok(out)
}
