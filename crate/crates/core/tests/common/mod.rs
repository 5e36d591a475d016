#![allow(dead_code)]

use std::io::Read;
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use proptest::prelude::*;
use sidetune::device::{run_device, run_device_tcp, BackboneSource, CutSpec, DeviceConfig, DeviceReport};
use sidetune::error::RejectReason;
use sidetune::quant::{QuantScheme, QuantizedActivation};
use sidetune::server::{bind, serve_listener, serve_session, ServerConfig, ServerReport};
use sidetune::train::AdamConfig;
use sidetune::transport::{duplex, Recording, Transcript};
use sidetune::wire::{
    decode_all, frame_len_act_batch, ActBatch, Hello, Message, MetricsSnapshot, MsgType, WireTap, PROTOCOL_VERSION,
};

/// The toy setup: vocab 16, S=15, B=16, H=32, L=4, 4 heads, M=4.
pub fn toy_device(scheme: QuantScheme, epochs: usize) -> DeviceConfig {
    DeviceConfig {
        backbone: BackboneSource::Seed(0),
        vocab_size: 16,
        hidden: 32,
        layers: 4,
        heads: 4,
        cuts: CutSpec::Uniform(4),
        seq: 15,
        batch: 16,
        epochs,
        batches_per_epoch: 25,
        scheme,
        ..DeviceConfig::default()
    }
}

pub fn toy_server() -> ServerConfig {
    ServerConfig {
        bottleneck: 8,
        adam: AdamConfig { lr: 5e-4, ..AdamConfig::default() },
        ..ServerConfig::default()
    }
}

/// A small, fast session for protocol checks.
pub fn tiny_device(iterations: usize) -> DeviceConfig {
    DeviceConfig {
        vocab_size: 16,
        hidden: 8,
        layers: 2,
        heads: 2,
        cuts: CutSpec::Uniform(2),
        seq: 3,
        batch: 2,
        epochs: 1,
        batches_per_epoch: iterations,
        ..DeviceConfig::default()
    }
}

pub fn tiny_server() -> ServerConfig {
    ServerConfig { bottleneck: 4, snapshot_every: 2, ..ServerConfig::default() }
}

/// Device and server as separate endpoints over TCP loopback.
pub fn split_tcp(device: &DeviceConfig, server: &ServerConfig) -> (DeviceReport, ServerReport) {
    let listener = bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let srv_cfg = server.clone();
    let srv = thread::spawn(move || serve_listener(&srv_cfg, &listener).map(|(_, r)| r));
    let dev = run_device_tcp(device, &addr).unwrap();
    (dev, srv.join().unwrap().unwrap())
}

pub struct Recorded {
    pub device: DeviceReport,
    pub server: ServerReport,
    pub up: Transcript,
    pub down: Transcript,
}

/// In-memory session with both directions recorded.
pub fn recorded_session(device: &DeviceConfig, server: &ServerConfig) -> Recorded {
    let (dev_end, srv_end) = duplex();
    let (srv_writer, down) = Recording::new(srv_end.writer);
    let (dev_writer, up) = Recording::new(dev_end.writer);
    let srv_cfg = server.clone();
    let srv = thread::spawn(move || serve_session(&srv_cfg, srv_end.reader, srv_writer));
    let dev = run_device(device, dev_end.reader, dev_writer).unwrap();
    let server = srv.join().unwrap().unwrap();
    // the server has dropped its writer, so the transcript is complete
    thread::sleep(Duration::from_millis(10));
    Recorded { device: dev, server, up, down }
}

/// The one-way contract: after the handshake the server only answers
/// checkpoint requests and sends metrics snapshots; activation batches carry
/// labels and quantized taps and nothing else.
pub fn check_one_way(up: &[u8], down: &[u8], token_rows: &[Vec<u32>]) -> Result<(), String> {
    let ups = decode_all(up).map_err(|e| e.to_string())?;
    let downs = decode_all(down).map_err(|e| e.to_string())?;
    match downs.first() {
        Some(Message::SessionAck { .. }) => {}
        other => return Err(format!("server opened with {other:?}")),
    }
    for m in &downs[1..] {
        if !matches!(m.msg_type(), MsgType::MetricsSnapshot | MsgType::CheckpointData) {
            return Err(format!("server sent {:?} during training", m.msg_type()));
        }
    }
    if !matches!(ups.first(), Some(Message::Hello(_))) || ups.last() != Some(&Message::Bye) {
        return Err("device session must open with Hello and close with Bye".into());
    }
    for m in &ups[1..ups.len() - 1] {
        match m {
            Message::ActBatch(b) => {
                let frame = sidetune::wire::encode(m).unwrap();
                if frame.len() != frame_len_act_batch(b) {
                    return Err(format!("batch {} has unaccounted bytes", b.batch_id));
                }
            }
            Message::CheckpointRequest => {}
            other => return Err(format!("device sent {:?} mid-session", other.msg_type())),
        }
    }
    for row in token_rows {
        let needle: Vec<u8> = row.iter().flat_map(|t| t.to_le_bytes()).collect();
        for hay in [up, down] {
            if hay.windows(needle.len()).any(|w| w == needle.as_slice()) {
                return Err("raw token ids found in the transcript".into());
            }
        }
    }
    Ok(())
}

/// Token rows the device used in its first epoch.
pub fn token_rows(cfg: &DeviceConfig) -> Vec<Vec<u32>> {
    let data = cfg.dataset().unwrap();
    (0..cfg.batches_per_epoch)
        .flat_map(|i| {
            let (t, _) = data.make_batch(i as u64, cfg.batch);
            (0..t.batch).map(|b| t.row(b).to_vec()).collect::<Vec<_>>()
        })
        .collect()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compare against a frozen file; `SIDETUNE_BLESS=1` rewrites it first.
pub fn golden_matches(name: &str, actual: &str) -> bool {
    let path = golden_path(name);
    if std::env::var_os("SIDETUNE_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    actual == want.trim_end()
}

pub fn scheme() -> impl Strategy<Value = QuantScheme> {
    prop::sample::select(QuantScheme::ALL.to_vec())
}

pub fn tap() -> impl Strategy<Value = WireTap> {
    (any::<u16>(), scheme(), 1usize..4, 1usize..5, 1usize..9, 0.0f32..1e6).prop_flat_map(|(idx, s, b, t, h, scale)| {
        let n = s.code_len(b * t * h);
        prop::collection::vec(any::<u8>(), n).prop_map(move |codes| WireTap {
            block_index: idx,
            act: QuantizedActivation { scheme: s, shape: [b, t, h], scale, codes },
        })
    })
}

pub fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (any::<u64>(), any::<u16>(), scheme(), any::<u32>(), any::<u16>(), any::<bool>()).prop_map(
            |(digest, gamma, scheme, hidden, classes, embedding_tap)| Message::Hello(Hello {
                protocol_version: PROTOCOL_VERSION,
                digest,
                gamma,
                scheme,
                hidden,
                classes,
                embedding_tap,
            })
        ),
        any::<u64>().prop_map(|session_id| Message::SessionAck { session_id }),
        (any::<u64>(), prop::collection::vec(any::<u32>(), 0..20), prop::collection::vec(tap(), 0..4))
            .prop_map(|(batch_id, labels, taps)| Message::ActBatch(ActBatch { batch_id, labels, taps })),
        (any::<u64>(), any::<u64>(), -1e3f32..1e3, 0.0f32..=1.0).prop_map(|(iterations, last_batch_id, loss, acc)| {
            Message::MetricsSnapshot(MetricsSnapshot { iterations, last_batch_id, loss, acc })
        }),
        Just(Message::CheckpointRequest),
        prop::collection::vec(any::<u8>(), 0..200).prop_map(Message::CheckpointData),
        Just(Message::Bye),
        prop::sample::select(vec![
            RejectReason::DigestMismatch,
            RejectReason::TapCountMismatch,
            RejectReason::VersionMismatch,
            RejectReason::Unsupported,
        ])
        .prop_map(Message::Reject),
    ]
}

/// Hands out a byte stream in caller-chosen piece sizes.
pub struct Chunked {
    pub data: Vec<u8>,
    pub pos: usize,
    pub sizes: Vec<usize>,
    pub turn: usize,
}

impl Chunked {
    pub fn new(data: Vec<u8>, sizes: Vec<usize>) -> Self {
        Self { data, pos: 0, sizes, turn: 0 }
    }
}

impl Read for Chunked {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let want = self.sizes[self.turn % self.sizes.len()];
        self.turn += 1;
        let n = want.min(buf.len()).min(self.data.len() - self.pos);
        buf[..n].copy_from_slice(&self.data[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

/// Size of one activation-batch frame this device config produces.
pub fn act_frame_len(cfg: &DeviceConfig) -> usize {
    let gamma = cfg.cuts.resolve(cfg.layers).unwrap().len() + usize::from(cfg.tap_embedding);
    let per_tap = sidetune::quant::payload_bytes([cfg.batch, cfg.seq, cfg.hidden], cfg.scheme);
    12 + 14 + 4 * cfg.batch + gamma * per_tap + 4
}
