//! Byte transports for [`WireMessage`] frames.

use std::io::Write;
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::wire::WireMessage;
use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

pub trait Transport {
    fn send(&mut self, msg: &WireMessage) -> Result<()>;
    fn recv(&mut self) -> Result<WireMessage>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, msg: &WireMessage) -> Result<()> {
        (**self).send(msg)
    }
    fn recv(&mut self) -> Result<WireMessage> {
        (**self).recv()
    }
}

/// One end of an in-process channel pair. Frames cross as encoded bytes so
/// the codec is exercised exactly as on a socket.
pub struct MemoryTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
}

impl MemoryTransport {
    pub fn pair() -> (Self, Self) {
        Self::pair_with_timeout(DEFAULT_TIMEOUT)
    }

    pub fn pair_with_timeout(timeout: Duration) -> (Self, Self) {
        let (a_tx, b_rx) = mpsc::channel();
        let (b_tx, a_rx) = mpsc::channel();
        (Self { tx: a_tx, rx: a_rx, timeout }, Self { tx: b_tx, rx: b_rx, timeout })
    }
}

impl Transport for MemoryTransport {
    fn send(&mut self, msg: &WireMessage) -> Result<()> {
        self.tx.send(msg.encode()).map_err(|_| Error::Closed)
    }

    fn recv(&mut self) -> Result<WireMessage> {
        match self.rx.recv_timeout(self.timeout) {
            Ok(bytes) => WireMessage::decode(&bytes),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Closed),
        }
    }
}

pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn new(stream: TcpStream, timeout: Duration) -> Result<Self> {
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    /// Accepts one connection.
    pub fn listen(listener: &TcpListener, timeout: Duration) -> Result<Self> {
        let (stream, peer) = listener.accept()?;
        log::info!("accepted connection from {peer}");
        Self::new(stream, timeout)
    }

    /// Connects, retrying until `timeout` elapses so the peer may start later.
    pub fn connect<A: ToSocketAddrs + Clone>(addr: A, timeout: Duration) -> Result<Self> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            match TcpStream::connect(addr.clone()) {
                Ok(s) => return Self::new(s, timeout),
                Err(e) if std::time::Instant::now() < deadline => {
                    log::debug!("connect failed ({e}), retrying");
                    std::thread::sleep(Duration::from_millis(50));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, msg: &WireMessage) -> Result<()> {
        self.stream.write_all(&msg.encode()).map_err(|e| match e.kind() {
            std::io::ErrorKind::BrokenPipe | std::io::ErrorKind::ConnectionReset => Error::Closed,
            _ => Error::Io(e),
        })
    }

    fn recv(&mut self) -> Result<WireMessage> {
        WireMessage::read_from(&mut self.stream).map(|(m, _)| m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// Wraps a transport and keeps every frame that passed through it.
pub struct RecordingTransport<T> {
    inner: T,
    pub log: Vec<(Direction, Vec<u8>)>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self { inner, log: Vec::new() }
    }

    pub fn into_inner(self) -> T {
        self.inner
    }

    /// SHA-256 over direction markers and frame bytes, in order.
    pub fn transcript_hash(&self) -> [u8; 32] {
        transcript_hash(&self.log)
    }
}

pub fn transcript_hash(log: &[(Direction, Vec<u8>)]) -> [u8; 32] {
    let mut h = Sha256::new();
    for (d, bytes) in log {
        h.update([*d as u8]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    h.finalize().into()
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn send(&mut self, msg: &WireMessage) -> Result<()> {
        self.inner.send(msg)?;
        self.log.push((Direction::Sent, msg.encode()));
        Ok(())
    }

    fn recv(&mut self) -> Result<WireMessage> {
        let m = self.inner.recv()?;
        self.log.push((Direction::Received, m.encode()));
        Ok(m)
    }
}
