//! Carriers. Both move encoded frames: the loopback pair passes byte buffers
//! over channels, the TCP link streams them through a [`FrameDecoder`].

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::frame::{decode, encode, FrameDecoder, WireMessage};
use super::{ProtocolError, TransportError};

/// A bidirectional, ordered, reliable frame channel to one peer.
pub trait Link: Send {
    /// Writes pre-encoded bytes. Used directly only to inject raw frames.
    fn send_raw(&mut self, bytes: &[u8]) -> Result<(), TransportError>;

    /// Waits for the next frame; `None` waits indefinitely.
    fn recv(&mut self, timeout: Option<Duration>) -> Result<WireMessage, TransportError>;

    /// Encodes and sends `msg`, returning its size on the wire.
    fn send(&mut self, msg: &WireMessage) -> Result<usize, TransportError> {
        let bytes = encode(msg);
        self.send_raw(&bytes)?;
        Ok(bytes.len())
    }
}

impl<L: Link + ?Sized> Link for Box<L> {
    fn send_raw(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        (**self).send_raw(bytes)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<WireMessage, TransportError> {
        (**self).recv(timeout)
    }
}

pub struct LoopbackLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected in-process endpoints.
pub fn loopback_pair() -> (LoopbackLink, LoopbackLink) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (LoopbackLink { tx: a_tx, rx: a_rx }, LoopbackLink { tx: b_tx, rx: b_rx })
}

impl Link for LoopbackLink {
    fn send_raw(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        self.tx.send(bytes.to_vec()).map_err(|_| TransportError::Closed)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<WireMessage, TransportError> {
        let bytes = match timeout {
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::Timeout(t),
                RecvTimeoutError::Disconnected => TransportError::Closed,
            })?,
            None => self.rx.recv().map_err(|_| TransportError::Closed)?,
        };
        let (msg, used) = decode(&bytes)?;
        if used != bytes.len() {
            return Err(ProtocolError::Malformed(format!("{} bytes after frame", bytes.len() - used)).into());
        }
        Ok(msg)
    }
}

const READ_CHUNK: usize = 256 * 1024;

pub struct TcpLink {
    stream: TcpStream,
    decoder: FrameDecoder,
    buf: Vec<u8>,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> std::io::Result<Self> {
        stream.set_nonblocking(false)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream,
            decoder: FrameDecoder::new(),
            buf: vec![0; READ_CHUNK],
        })
    }

    pub fn peer_addr(&self) -> Option<SocketAddr> {
        self.stream.peer_addr().ok()
    }
}

impl Link for TcpLink {
    fn send_raw(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        self.stream.write_all(bytes).map_err(|e| match e.kind() {
            ErrorKind::BrokenPipe | ErrorKind::ConnectionReset => TransportError::Closed,
            _ => TransportError::Io(e),
        })
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<WireMessage, TransportError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            if let Some((msg, _)) = self.decoder.next_frame()? {
                return Ok(msg);
            }
            let wait = match deadline {
                Some(d) => {
                    let left = d.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Err(TransportError::Timeout(timeout.unwrap_or_default()));
                    }
                    Some(left)
                }
                None => None,
            };
            self.stream.set_read_timeout(wait)?;
            match self.stream.read(&mut self.buf) {
                Ok(0) => return Err(TransportError::Closed),
                Ok(n) => self.decoder.extend(&self.buf[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Err(TransportError::Timeout(timeout.unwrap_or_default()))
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) if e.kind() == ErrorKind::ConnectionReset => return Err(TransportError::Closed),
                Err(e) => return Err(e.into()),
            }
        }
    }
}

pub struct SocketServer {
    listener: TcpListener,
}

impl SocketServer {
    pub fn bind(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts `n` connections, in arrival order.
    pub fn accept(&self, n: usize, timeout: Duration) -> Result<Vec<TcpLink>, TransportError> {
        self.listener.set_nonblocking(true)?;
        let deadline = Instant::now() + timeout;
        let mut links = Vec::with_capacity(n);
        while links.len() < n {
            match self.listener.accept() {
                Ok((stream, addr)) => {
                    log::debug!("accepted connection from {addr}");
                    links.push(TcpLink::new(stream)?);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Timeout(timeout));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(links)
    }
}

/// Connects to `addr`, retrying until `timeout` elapses.
pub fn connect(addr: &str, timeout: Duration) -> Result<TcpLink, TransportError> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect(addr) {
            Ok(stream) => return Ok(TcpLink::new(stream)?),
            Err(e) if Instant::now() < deadline => {
                log::debug!("connect {addr}: {e}; retrying");
                thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

/// Frames seen by one endpoint, as encoded bytes.
pub type Transcript = Arc<Mutex<Vec<(Direction, Vec<u8>)>>>;

/// Wraps a link and records every frame it carries.
pub struct RecordingLink<L> {
    inner: L,
    transcript: Transcript,
}

impl<L: Link> RecordingLink<L> {
    pub fn new(inner: L) -> Self {
        Self {
            inner,
            transcript: Transcript::default(),
        }
    }

    pub fn transcript(&self) -> Transcript {
        Arc::clone(&self.transcript)
    }
}

impl<L: Link> Link for RecordingLink<L> {
    fn send_raw(&mut self, bytes: &[u8]) -> Result<(), TransportError> {
        self.inner.send_raw(bytes)?;
        self.transcript.lock().unwrap().push((Direction::Sent, bytes.to_vec()));
        Ok(())
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<WireMessage, TransportError> {
        let msg = self.inner.recv(timeout)?;
        self.transcript.lock().unwrap().push((Direction::Received, encode(&msg)));
        Ok(msg)
    }
}
