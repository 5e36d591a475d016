//! Server side: accept a session, train the side-network on incoming
//! activation batches, serve checkpoints.
//!
//! A receive worker decodes frames into a bounded queue; the training worker
//! is the only consumer and the only writer back to the device, so replies
//! always reflect parameters at an iteration boundary.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crate::device::{run_device, DeviceConfig, DeviceReport};
use crate::error::{Error, RejectReason, Result};
use crate::jsonl::JsonlLog;
use crate::queue::{BoundedQueue, PopTimeout, QueueStats};
use crate::rng::Rng;
use crate::side::{SideConfig, SideParams};
use crate::tensor::Activation;
use crate::train::{AdamConfig, IterationMetrics, LossKind, TrainConfig, Trainer};
use crate::transport::{duplex, tcp_endpoint};
use crate::wire::{encode, FrameReader, Hello, Message, MetricsSnapshot, PROTOCOL_VERSION};

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub listen: String,
    pub bottleneck: usize,
    pub init_std: f64,
    pub activation: Activation,
    pub adam: AdamConfig,
    pub loss: LossKind,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub queue_depth: usize,
    /// Send a metrics snapshot every this many iterations; 0 disables.
    pub snapshot_every: u64,
    pub handshake_timeout: Duration,
    pub expect_digest: Option<u64>,
    pub expect_gamma: Option<usize>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:7878".into(),
            bottleneck: 16,
            init_std: 0.02,
            activation: Activation::Gelu,
            adam: AdamConfig::default(),
            loss: LossKind::CrossEntropy,
            seed: 0,
            checkpoint: None,
            metrics: None,
            queue_depth: 4,
            snapshot_every: 10,
            handshake_timeout: Duration::from_secs(10),
            expect_digest: None,
            expect_gamma: None,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queue_depth == 0 {
            return Err(Error::Config("queue depth must be at least 1".into()));
        }
        if self.bottleneck == 0 {
            return Err(Error::Config("bottleneck must be positive".into()));
        }
        Ok(())
    }

    /// Side-network shape for a device's Hello, or the reason to refuse it.
    pub fn admit(&self, hello: &Hello) -> std::result::Result<SideConfig, RejectReason> {
        if hello.protocol_version != PROTOCOL_VERSION {
            return Err(RejectReason::VersionMismatch);
        }
        if self.expect_digest.is_some_and(|d| d != hello.digest) {
            return Err(RejectReason::DigestMismatch);
        }
        let gamma = hello.gamma as usize;
        let blocks = gamma.saturating_sub(usize::from(hello.embedding_tap));
        if self.expect_gamma.is_some_and(|g| g != gamma) || blocks == 0 {
            return Err(RejectReason::TapCountMismatch);
        }
        let side = SideConfig {
            hidden: hello.hidden as usize,
            bottleneck: self.bottleneck,
            blocks,
            classes: hello.classes as usize,
            activation: self.activation,
            init_std: self.init_std,
            embedding_tap: hello.embedding_tap,
        };
        side.validate().map_err(|_| RejectReason::Unsupported)?;
        Ok(side)
    }
}

#[derive(Debug, Clone)]
pub struct ServerReport {
    pub session_id: u64,
    pub metrics: Vec<IterationMetrics>,
    /// Batches refused for arriving out of order.
    pub dropped: usize,
    pub checkpoints_served: usize,
    pub snapshots_sent: usize,
    pub params: SideParams<f32>,
    pub inbound: QueueStats,
}

impl ServerReport {
    pub fn losses(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.loss).collect()
    }
}

enum Inbound {
    Msg(Message),
    Failed(Error),
    Eof,
}

fn spawn_receiver<R: Read + Send + 'static>(reader: R, queue: Arc<BoundedQueue<Inbound>>) {
    thread::spawn(move || {
        let mut frames = FrameReader::new(reader);
        loop {
            let (item, bytes, last) = match frames.next_message() {
                Ok(Some((m, n))) => (Inbound::Msg(m), n, false),
                Ok(None) => (Inbound::Eof, 0, true),
                Err(e) => (Inbound::Failed(e), 0, true),
            };
            if queue.push(item, bytes).is_err() || last {
                break;
            }
        }
    });
}

fn send(w: &mut dyn Write, msg: &Message) -> Result<()> {
    w.write_all(&encode(msg)?)?;
    w.flush()?;
    Ok(())
}

/// Serve one session on a connected transport until the device says Bye.
pub fn serve_session<R, W>(config: &ServerConfig, reader: R, mut writer: W) -> Result<ServerReport>
where
    R: Read + Send + 'static,
    W: Write,
{
    config.validate()?;
    let queue = Arc::new(BoundedQueue::new(config.queue_depth));
    spawn_receiver(reader, queue.clone());
    let result = serve(config, &queue, &mut writer);
    queue.close();
    result
}

fn serve(config: &ServerConfig, queue: &BoundedQueue<Inbound>, writer: &mut dyn Write) -> Result<ServerReport> {
    let hello = match queue.pop_timeout(config.handshake_timeout) {
        PopTimeout::Item(Inbound::Msg(Message::Hello(h))) => h,
        PopTimeout::Item(Inbound::Msg(other)) => {
            return Err(Error::Handshake(format!("expected Hello, got {:?}", other.msg_type())))
        }
        PopTimeout::Item(Inbound::Failed(e)) => return Err(e),
        PopTimeout::Item(Inbound::Eof) | PopTimeout::Closed => return Err(Error::Closed),
        PopTimeout::TimedOut => return Err(Error::Timeout("device hello")),
    };
    let side = match config.admit(&hello) {
        Ok(side) => side,
        Err(reason) => {
            log::warn!("rejecting session: {reason:?}");
            send(writer, &Message::Reject(reason))?;
            return Err(Error::Rejected(reason));
        }
    };
    let session_id = Rng::new(config.seed ^ hello.digest).next_u64();
    send(writer, &Message::SessionAck { session_id })?;
    log::info!("session {session_id:#x}: H={} M={} C={} scheme {}", side.hidden, side.blocks, side.classes, hello.scheme);

    let mut trainer = Trainer::new(&TrainConfig { side, adam: config.adam, loss: config.loss, seed: config.seed })?;
    let mut log = JsonlLog::create(config.metrics.as_deref())?;
    let mut metrics = Vec::new();
    let (mut dropped, mut checkpoints_served, mut snapshots_sent) = (0, 0, 0);

    loop {
        let msg = match queue.pop() {
            Some(Inbound::Msg(m)) => m,
            Some(Inbound::Failed(e)) => return Err(e),
            Some(Inbound::Eof) | None => return Err(Error::Closed),
        };
        match msg {
            Message::ActBatch(batch) => match trainer.train_iteration(&batch) {
                Ok(m) => {
                    log.append(&m)?;
                    let snapshot = MetricsSnapshot {
                        iterations: trainer.iterations(),
                        last_batch_id: m.batch_id,
                        loss: m.loss as f32,
                        acc: m.acc as f32,
                    };
                    metrics.push(m);
                    if config.snapshot_every > 0 && trainer.iterations() % config.snapshot_every == 0 {
                        send(writer, &Message::MetricsSnapshot(snapshot))?;
                        snapshots_sent += 1;
                    }
                }
                Err(Error::Protocol(why)) => {
                    log::warn!("dropping batch: {why}");
                    dropped += 1;
                }
                Err(e) => return Err(e),
            },
            Message::CheckpointRequest => {
                send(writer, &Message::CheckpointData(trainer.params().to_bytes()))?;
                checkpoints_served += 1;
            }
            Message::Bye => break,
            other => log::warn!("ignoring unexpected {:?}", other.msg_type()),
        }
    }

    log.flush()?;
    if let Some(path) = &config.checkpoint {
        trainer.params().save(path)?;
    }
    Ok(ServerReport {
        session_id,
        metrics,
        dropped,
        checkpoints_served,
        snapshots_sent,
        params: trainer.params().clone(),
        inbound: queue.stats(),
    })
}

/// Accepts `:PORT` as shorthand for every interface.
pub fn bind(listen: &str) -> Result<TcpListener> {
    let addr = match listen.strip_prefix(':') {
        Some(port) => format!("0.0.0.0:{port}"),
        None => listen.to_string(),
    };
    TcpListener::bind(&addr).map_err(|e| Error::Config(format!("cannot listen on {addr}: {e}")))
}

/// Accept one connection and serve it.
pub fn serve_listener(config: &ServerConfig, listener: &TcpListener) -> Result<(SocketAddr, ServerReport)> {
    let (stream, peer) = listener.accept()?;
    log::info!("device connected from {peer}");
    let ep = tcp_endpoint(stream)?;
    Ok((peer, serve_session(config, ep.reader, ep.writer)?))
}

pub fn run_server(config: &ServerConfig) -> Result<ServerReport> {
    config.validate()?;
    let listener = bind(&config.listen)?;
    log::info!("listening on {}", listener.local_addr()?);
    serve_listener(config, &listener).map(|(_, r)| r)
}

/// Device and server in one process over an in-memory transport.
pub fn local_mode(device: &DeviceConfig, server: &ServerConfig) -> Result<(DeviceReport, ServerReport)> {
    let (dev_end, srv_end) = duplex();
    let server_cfg = server.clone();
    let srv = thread::spawn(move || serve_session(&server_cfg, srv_end.reader, srv_end.writer));
    let dev = run_device(device, dev_end.reader, dev_end.writer);
    let srv = srv.join().expect("server worker panicked");
    match (dev, srv) {
        (Ok(d), Ok(s)) => Ok((d, s)),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantScheme;

    fn hello() -> Hello {
        Hello {
            protocol_version: PROTOCOL_VERSION,
            digest: 5,
            gamma: 4,
            scheme: QuantScheme::Nf4,
            hidden: 32,
            classes: 2,
            embedding_tap: false,
        }
    }

    #[test]
    fn admission_rules() {
        let cfg = ServerConfig { bottleneck: 8, ..ServerConfig::default() };
        assert_eq!(cfg.admit(&hello()).unwrap().blocks, 4);
        let emb = Hello { embedding_tap: true, ..hello() };
        assert_eq!(cfg.admit(&emb).unwrap().blocks, 3);
        assert_eq!(cfg.admit(&Hello { protocol_version: 2, ..hello() }), Err(RejectReason::VersionMismatch));
        let strict = ServerConfig { expect_digest: Some(6), ..cfg.clone() };
        assert_eq!(strict.admit(&hello()), Err(RejectReason::DigestMismatch));
        let strict = ServerConfig { expect_gamma: Some(3), ..cfg.clone() };
        assert_eq!(strict.admit(&hello()), Err(RejectReason::TapCountMismatch));
        assert_eq!(cfg.admit(&Hello { gamma: 0, ..hello() }), Err(RejectReason::TapCountMismatch));
        assert_eq!(cfg.admit(&Hello { hidden: 8, ..hello() }), Err(RejectReason::Unsupported));
    }

    #[test]
    fn bind_shorthand() {
        let l = bind(":0").unwrap();
        assert!(l.local_addr().unwrap().port() > 0);
        assert!(matches!(bind("not an address"), Err(Error::Config(_))));
    }

    #[test]
    fn local_mode_runs_end_to_end() {
        let dev = DeviceConfig { seq: 7, epochs: 1, batches_per_epoch: 5, batch: 4, fetch_checkpoint: true, ..DeviceConfig::default() };
        let srv = ServerConfig { bottleneck: 8, snapshot_every: 2, ..ServerConfig::default() };
        let (d, s) = local_mode(&dev, &srv).unwrap();
        assert_eq!(d.iterations, 5);
        assert_eq!(s.metrics.iter().map(|m| m.batch_id).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert_eq!(d.session_id, s.session_id);
        assert_eq!(d.checkpoint.unwrap().to_flat(), s.params.to_flat());
        assert_eq!(s.snapshots_sent, 2);
        assert_eq!(d.last_metrics.unwrap().iterations, 4);
    }
}
