//! Byte-stream transports: an in-process pipe, a bandwidth limiter, a
//! transcript recorder, and TCP.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};

/// Writing half of an in-memory pipe. Dropping it ends the stream.
pub struct PipeWriter {
    tx: Sender<Vec<u8>>,
}

/// Reading half of an in-memory pipe.
pub struct PipeReader {
    rx: Receiver<Vec<u8>>,
    pending: Vec<u8>,
    at: usize,
}

pub fn pipe() -> (PipeWriter, PipeReader) {
    let (tx, rx) = unbounded();
    (PipeWriter { tx }, PipeReader { rx, pending: Vec::new(), at: 0 })
}

impl Write for PipeWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "pipe reader dropped"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Read for PipeReader {
    fn read(&mut self, out: &mut [u8]) -> io::Result<usize> {
        if self.at == self.pending.len() {
            match self.rx.recv() {
                Ok(chunk) => {
                    self.pending = chunk;
                    self.at = 0;
                }
                Err(_) => return Ok(0),
            }
        }
        let n = out.len().min(self.pending.len() - self.at);
        out[..n].copy_from_slice(&self.pending[self.at..self.at + n]);
        self.at += n;
        Ok(n)
    }
}

/// One side of a bidirectional connection.
pub struct Endpoint<R, W> {
    pub reader: R,
    pub writer: W,
}

/// Two connected endpoints over in-memory pipes.
pub fn duplex() -> (Endpoint<PipeReader, PipeWriter>, Endpoint<PipeReader, PipeWriter>) {
    let (a_tx, b_rx) = pipe();
    let (b_tx, a_rx) = pipe();
    (
        Endpoint { reader: a_rx, writer: a_tx },
        Endpoint { reader: b_rx, writer: b_tx },
    )
}

pub fn tcp_endpoint(stream: TcpStream) -> io::Result<Endpoint<TcpStream, TcpStream>> {
    stream.set_nodelay(true)?;
    Ok(Endpoint { reader: stream.try_clone()?, writer: stream })
}

/// Holds each write until the link would have finished carrying it at
/// `bits_per_sec`. Back-to-back writes queue behind each other.
pub struct RateLimited<W> {
    inner: W,
    bits_per_sec: f64,
    busy_until: Option<Instant>,
}

impl<W> RateLimited<W> {
    pub fn new(inner: W, bits_per_sec: f64) -> Self {
        assert!(bits_per_sec > 0.0, "rate must be positive");
        Self { inner, bits_per_sec, busy_until: None }
    }

    pub fn transmit_time(&self, bytes: usize) -> Duration {
        Duration::from_secs_f64(bytes as f64 * 8.0 / self.bits_per_sec)
    }
}

impl<W: Write> Write for RateLimited<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let now = Instant::now();
        let start = self.busy_until.map_or(now, |t| t.max(now));
        let done = start + self.transmit_time(buf.len());
        self.busy_until = Some(done);
        if let Some(wait) = done.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        self.inner.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Shared copy of every byte passed through a [`Recording`] writer.
#[derive(Clone, Default)]
pub struct Transcript(Arc<Mutex<Vec<u8>>>);

impl Transcript {
    pub fn bytes(&self) -> Vec<u8> {
        self.0.lock().expect("transcript lock").clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().expect("transcript lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct Recording<W> {
    inner: W,
    log: Transcript,
}

impl<W> Recording<W> {
    pub fn new(inner: W) -> (Self, Transcript) {
        let log = Transcript::default();
        (Self { inner, log: log.clone() }, log)
    }
}

impl<W: Write> Write for Recording<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.log.0.lock().expect("transcript lock").extend_from_slice(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}
