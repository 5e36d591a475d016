//! Device side: sample a batch, run the frozen backbone forward, quantize
//! the taps and stream them to the server.
//!
//! Two workers share one bounded queue. The compute worker produces encoded
//! frames and blocks when the queue is full; the send worker drains it onto
//! the transport. Raw tokens never leave this module: an activation batch
//! carries only labels and quantized taps.

use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError};
use serde::Serialize;

use crate::backbone::{forward_collect, init_backbone, BackboneConfig, BackboneWeights, TokenBatch};
use crate::error::{Error, RejectReason, Result};
use crate::jsonl::JsonlLog;
use crate::quant::{quantize, QuantScheme};
use crate::queue::{BoundedQueue, QueueStats};
use crate::rng::Rng;
use crate::side::SideParams;
use crate::transport::{tcp_endpoint, RateLimited};
use crate::wire::{encode, ActBatch, FrameReader, Hello, Message, MetricsSnapshot, WireTap, PROTOCOL_VERSION};

/// Majority-parity toy task: label 1 when even token ids outnumber odd ones.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub vocab_size: usize,
    pub seq: usize,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn label(tokens: &[u32]) -> u32 {
        let even = tokens.iter().filter(|&&t| t % 2 == 0).count();
        u32::from(2 * even > tokens.len())
    }

    /// Deterministic in `(seed, batch_index)`.
    pub fn make_batch(&self, batch_index: u64, batch: usize) -> (TokenBatch, Vec<u32>) {
        let mut rng = Rng::with_stream(self.seed, batch_index);
        let ids: Vec<u32> = (0..batch * self.seq)
            .map(|_| rng.below(self.vocab_size as u32))
            .collect();
        let labels = ids.chunks(self.seq).map(Self::label).collect();
        let tokens = TokenBatch::new(batch, self.seq, ids).expect("sized by construction");
        (tokens, labels)
    }
}

/// Rows of `seq` token ids followed by an integer label; no header.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvDataset {
    pub seq: usize,
    pub rows: Vec<(Vec<u32>, u32)>,
}

impl CsvDataset {
    pub fn load(path: &Path, seq: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() != seq + 1 {
                return Err(Error::Input(format!(
                    "row {i}: {} fields, expected {seq} tokens and a label",
                    rec.len()
                )));
            }
            let vals = rec
                .iter()
                .map(|f| f.parse::<u32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Input(format!("row {i}: {e}")))?;
            rows.push((vals[..seq].to_vec(), vals[seq]));
        }
        Ok(Self { seq, rows })
    }

    pub fn make_batch(&self, batch_index: u64, batch: usize) -> (TokenBatch, Vec<u32>) {
        let start = batch_index as usize * batch;
        let rows = &self.rows[start..start + batch];
        let ids = rows.iter().flat_map(|(t, _)| t.iter().copied()).collect();
        let labels = rows.iter().map(|(_, y)| *y).collect();
        (TokenBatch::new(batch, self.seq, ids).expect("rows have seq tokens"), labels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Synthetic(SyntheticTask),
    Csv(CsvDataset),
}

impl Dataset {
    pub fn make_batch(&self, batch_index: u64, batch: usize) -> (TokenBatch, Vec<u32>) {
        match self {
            Dataset::Synthetic(t) => t.make_batch(batch_index, batch),
            Dataset::Csv(d) => d.make_batch(batch_index, batch),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskSpec {
    Synthetic,
    Csv(PathBuf),
}

impl FromStr for TaskSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth" => Ok(Self::Synthetic),
            _ => match s.strip_prefix("csv:") {
                Some(p) if !p.is_empty() => Ok(Self::Csv(PathBuf::from(p))),
                _ => Err(Error::Config(format!("unknown task {s:?} (synth|csv:PATH)"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CutSpec {
    Uniform(usize),
    List(Vec<usize>),
}

impl CutSpec {
    pub fn resolve(&self, layers: usize) -> Result<Vec<usize>> {
        match self {
            CutSpec::Uniform(m) => crate::backbone::uniform_cuts(layers, *m),
            CutSpec::List(v) => Ok(v.clone()),
        }
    }
}

impl FromStr for CutSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad cuts {s:?} (uniform:M or a comma list like 1,3,4)"));
        if let Some(m) = s.strip_prefix("uniform:") {
            return m.parse().map(CutSpec::Uniform).map_err(|_| bad());
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(CutSpec::List)
            .map_err(|_| bad())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneSource {
    Seed(u64),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceConfig {
    pub backbone: BackboneSource,
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub cuts: CutSpec,
    pub tap_embedding: bool,
    pub scheme: QuantScheme,
    pub batch: usize,
    pub seq: usize,
    pub epochs: usize,
    /// Batches per epoch for the synthetic task; CSV epochs cover the file.
    pub batches_per_epoch: usize,
    pub classes: usize,
    pub task: TaskSpec,
    pub seed: u64,
    pub queue_depth: usize,
    pub log: Option<PathBuf>,
    /// Compute then send inline, with no overlap.
    pub serial: bool,
    /// Outbound link rate in bits per second.
    pub rate_bps: Option<f64>,
    /// Pad every forward pass to at least this long.
    pub min_compute: Option<Duration>,
    pub fetch_checkpoint: bool,
    pub handshake_timeout: Duration,
    pub reply_timeout: Duration,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSource::Seed(0),
            vocab_size: 16,
            hidden: 32,
            layers: 4,
            heads: 4,
            cuts: CutSpec::Uniform(4),
            tap_embedding: false,
            scheme: QuantScheme::Nf4,
            batch: 16,
            seq: 256,
            epochs: 20,
            batches_per_epoch: 25,
            classes: 2,
            task: TaskSpec::Synthetic,
            seed: 0,
            queue_depth: 4,
            log: None,
            serial: false,
            rate_bps: None,
            min_compute: None,
            fetch_checkpoint: false,
            handshake_timeout: Duration::from_secs(10),
            reply_timeout: Duration::from_secs(120),
        }
    }
}

impl DeviceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queue_depth == 0 {
            return Err(Error::Config("queue depth must be at least 1".into()));
        }
        if self.batch == 0 || self.seq == 0 || self.batches_per_epoch == 0 || self.classes == 0 {
            return Err(Error::Config("batch, seq, batches per epoch and classes must be positive".into()));
        }
        if matches!(self.rate_bps, Some(r) if !(r > 0.0)) {
            return Err(Error::Config("rate must be positive".into()));
        }
        Ok(())
    }

    /// Build or load the frozen backbone with this config's taps.
    pub fn load_backbone(&self) -> Result<BackboneWeights> {
        match &self.backbone {
            BackboneSource::Seed(seed) => {
                let cuts = self.cuts.resolve(self.layers)?;
                let mut cfg = BackboneConfig::new(self.vocab_size, self.hidden, self.layers, self.heads, self.seq, cuts.len())?;
                cfg.block_cuts = cuts;
                cfg.tap_embedding = self.tap_embedding;
                cfg.validate()?;
                init_backbone(&cfg, *seed)
            }
            BackboneSource::File(path) => {
                let w = BackboneWeights::load(path, None)?;
                let cuts = self.cuts.resolve(w.config().layers)?;
                let w = w.with_cuts(cuts, self.tap_embedding)?;
                if w.config().max_seq < self.seq {
                    return Err(Error::Config(format!(
                        "sequence length {} exceeds the backbone's {}",
                        self.seq,
                        w.config().max_seq
                    )));
                }
                Ok(w)
            }
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Ok(match &self.task {
            TaskSpec::Synthetic => Dataset::Synthetic(SyntheticTask {
                vocab_size: self.vocab_size,
                seq: self.seq,
                seed: self.seed,
            }),
            TaskSpec::Csv(p) => Dataset::Csv(CsvDataset::load(p, self.seq)?),
        })
    }

    fn batches_per_epoch_for(&self, data: &Dataset) -> Result<usize> {
        match data {
            Dataset::Synthetic(_) => Ok(self.batches_per_epoch),
            Dataset::Csv(d) => match d.rows.len() / self.batch {
                0 => Err(Error::Input(format!("{} rows cannot fill one batch of {}", d.rows.len(), self.batch))),
                n => Ok(n),
            },
        }
    }

    pub fn hello(&self, backbone: &BackboneWeights) -> Hello {
        let cfg = backbone.config();
        Hello {
            protocol_version: PROTOCOL_VERSION,
            digest: cfg.digest(),
            gamma: cfg.gamma() as u16,
            scheme: self.scheme,
            hidden: cfg.hidden as u32,
            classes: self.classes as u16,
            embedding_tap: cfg.tap_embedding,
        }
    }
}

/// One row of the device JSONL log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceRecord {
    pub batch_id: u64,
    pub t_fwd_ms: f64,
    pub t_quant_ms: f64,
    pub t_send_ms: f64,
    pub queue_depth: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone)]
pub struct DeviceReport {
    pub session_id: u64,
    pub iterations: usize,
    /// ActBatch frame bytes only.
    pub act_bytes: usize,
    /// Every byte the device wrote.
    pub bytes_sent: usize,
    /// From the first forward pass to the last batch on the wire.
    pub wall: Duration,
    pub records: Vec<DeviceRecord>,
    pub queue: QueueStats,
    pub last_metrics: Option<MetricsSnapshot>,
    pub checkpoint: Option<SideParams<f32>>,
}

struct Produced {
    batch_id: u64,
    frame: Vec<u8>,
    t_fwd_ms: f64,
    t_quant_ms: f64,
}

/// Forward, quantize and encode one batch.
fn produce(
    backbone: &BackboneWeights,
    data: &Dataset,
    config: &DeviceConfig,
    iteration: usize,
    per_epoch: usize,
) -> Result<Produced> {
    let start = Instant::now();
    let (tokens, labels) = data.make_batch((iteration % per_epoch) as u64, config.batch);
    let taps = forward_collect(backbone, &tokens)?;
    if let Some(floor) = config.min_compute {
        if let Some(rest) = floor.checked_sub(start.elapsed()) {
            thread::sleep(rest);
        }
    }
    let t_fwd_ms = start.elapsed().as_secs_f64() * 1e3;

    let start = Instant::now();
    let taps = taps
        .taps
        .iter()
        .map(|t| {
            Ok(WireTap {
                block_index: t.block_index as u16,
                act: quantize(&t.activation, config.scheme)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let batch_id = iteration as u64;
    let frame = encode(&Message::ActBatch(ActBatch { batch_id, labels, taps }))?;
    let t_quant_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(Produced { batch_id, frame, t_fwd_ms, t_quant_ms })
}

fn send(w: &mut dyn Write, msg: &Message) -> Result<usize> {
    let frame = encode(msg)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(frame.len())
}

fn spawn_receiver<R: Read + Send + 'static>(reader: R) -> Receiver<Result<Message>> {
    let (tx, rx) = unbounded();
    thread::spawn(move || {
        let mut frames = FrameReader::new(reader);
        loop {
            match frames.next_message() {
                Ok(Some((m, _))) => {
                    if tx.send(Ok(m)).is_err() {
                        break;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        }
    });
    rx
}

fn await_reply(inbox: &Receiver<Result<Message>>, timeout: Duration, what: &'static str) -> Result<Message> {
    match inbox.recv_timeout(timeout) {
        Ok(m) => m,
        Err(RecvTimeoutError::Timeout) => Err(Error::Timeout(what)),
        Err(RecvTimeoutError::Disconnected) => Err(Error::Closed),
    }
}

/// Run a full device session over an already connected transport.
pub fn run_device<R, W>(config: &DeviceConfig, reader: R, writer: W) -> Result<DeviceReport>
where
    R: Read + Send + 'static,
    W: Write + Send,
{
    config.validate()?;
    let backbone = config.load_backbone()?;
    let data = config.dataset()?;
    let per_epoch = config.batches_per_epoch_for(&data)?;
    let total = config.epochs * per_epoch;
    let mut log = JsonlLog::create(config.log.as_deref())?;

    let mut writer: Box<dyn Write + Send + '_> = match config.rate_bps {
        Some(r) => Box::new(RateLimited::new(writer, r)),
        None => Box::new(writer),
    };
    let inbox = spawn_receiver(reader);

    let mut bytes_sent = send(&mut *writer, &Message::Hello(config.hello(&backbone)))?;
    let session_id = match await_reply(&inbox, config.handshake_timeout, "session ack")? {
        Message::SessionAck { session_id } => session_id,
        Message::Reject(RejectReason::VersionMismatch) => {
            return Err(Error::Handshake(format!("server rejected protocol version {PROTOCOL_VERSION}")))
        }
        Message::Reject(reason) => return Err(Error::Rejected(reason)),
        other => return Err(Error::Handshake(format!("expected SessionAck, got {:?}", other.msg_type()))),
    };
    log::info!("session {session_id:#x}: {total} iterations, scheme {}", config.scheme);

    let queue = BoundedQueue::<Produced>::new(config.queue_depth);
    let mut records = Vec::with_capacity(total);
    let mut act_bytes = 0;
    let started = Instant::now();

    let mut transmit = |item: Produced, depth: usize, w: &mut dyn Write| -> Result<()> {
        let t = Instant::now();
        w.write_all(&item.frame)?;
        w.flush()?;
        let row = DeviceRecord {
            batch_id: item.batch_id,
            t_fwd_ms: item.t_fwd_ms,
            t_quant_ms: item.t_quant_ms,
            t_send_ms: t.elapsed().as_secs_f64() * 1e3,
            queue_depth: depth,
            bytes: item.frame.len(),
        };
        act_bytes += row.bytes;
        log.append(&row)?;
        records.push(row);
        Ok(())
    };

    if config.serial {
        for it in 0..total {
            let item = produce(&backbone, &data, config, it, per_epoch)?;
            transmit(item, 0, &mut *writer)?;
        }
    } else {
        thread::scope(|s| -> Result<()> {
            let compute = s.spawn(|| -> Result<()> {
                let out = (0..total).try_for_each(|it| {
                    let item = produce(&backbone, &data, config, it, per_epoch)?;
                    let bytes = item.frame.len();
                    // a closed queue means the sender failed and reports why
                    let _ = queue.push(item, bytes);
                    Ok(())
                });
                queue.close();
                out
            });
            let mut sent = Ok(());
            while let Some(item) = queue.pop() {
                let depth = queue.stats().len;
                if let Err(e) = transmit(item, depth, &mut *writer) {
                    queue.close();
                    sent = Err(e);
                    break;
                }
            }
            let computed = compute.join().expect("compute worker panicked");
            sent.and(computed)
        })?;
    }
    let wall = started.elapsed();
    bytes_sent += act_bytes;

    let mut last_metrics = None;
    let mut checkpoint = None;
    if config.fetch_checkpoint {
        bytes_sent += send(&mut *writer, &Message::CheckpointRequest)?;
        loop {
            match await_reply(&inbox, config.reply_timeout, "checkpoint data")? {
                Message::MetricsSnapshot(m) => last_metrics = Some(m),
                Message::CheckpointData(bytes) => {
                    checkpoint = Some(SideParams::<f32>::read_from(&bytes[..], None)?);
                    break;
                }
                other => {
                    return Err(Error::Protocol(format!("unexpected {:?} while awaiting checkpoint", other.msg_type())))
                }
            }
        }
    }
    bytes_sent += send(&mut *writer, &Message::Bye)?;
    drop(writer);
    for m in inbox.try_iter() {
        if let Ok(Message::MetricsSnapshot(s)) = m {
            last_metrics = Some(s);
        }
    }
    log.flush()?;

    Ok(DeviceReport {
        session_id,
        iterations: records.len(),
        act_bytes,
        bytes_sent,
        wall,
        records,
        queue: queue.stats(),
        last_metrics,
        checkpoint,
    })
}

/// Connect over TCP, retrying until `timeout` while the server comes up.
pub fn connect(addr: &str, timeout: Duration) -> Result<TcpStream> {
    let addrs: Vec<_> = addr
        .to_socket_addrs()
        .map_err(|e| Error::Config(format!("bad server address {addr:?}: {e}")))?
        .collect();
    let deadline = Instant::now() + timeout;
    loop {
        let mut last = None;
        for a in &addrs {
            match TcpStream::connect(a) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
        if Instant::now() >= deadline {
            return Err(last.map_or(Error::Timeout("server connection"), Error::Io));
        }
        thread::sleep(Duration::from_millis(50));
    }
}

pub fn run_device_tcp(config: &DeviceConfig, addr: &str) -> Result<DeviceReport> {
    let ep = tcp_endpoint(connect(addr, config.handshake_timeout)?)?;
    run_device(config, ep.reader, ep.writer)
}
