use std::io::{self, BufReader, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::{Acceptor, Connection, FrameReader, FrameWriter, Transport, MAX_FRAME};
use crate::error::{Error, Result};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const ACCEPT_POLL: Duration = Duration::from_millis(10);

/// TCP transport bound to one local interface address.
pub struct TcpTransport {
    host: String,
}

impl TcpTransport {
    pub fn new(host: impl Into<String>) -> Self {
        TcpTransport { host: host.into() }
    }
}

fn dial(host: &str, port: u16) -> Result<TcpStream> {
    let addrs: Vec<_> = (host, port)
        .to_socket_addrs()
        .map_err(|e| Error::HostUnreachable(format!("{host}: {e}")))?
        .collect();
    let mut last = Error::HostUnreachable(host.to_string());
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT) {
            Ok(s) => {
                s.set_nodelay(true).ok();
                return Ok(s);
            }
            Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => {
                last = Error::ConnectionRefused(format!("{host}:{port}"));
            }
            Err(e) => last = Error::HostUnreachable(format!("{host}:{port}: {e}")),
        }
    }
    Err(last)
}

fn framed(stream: TcpStream) -> Result<Connection> {
    let local = stream.local_addr()?.to_string();
    let peer = stream.peer_addr()?.to_string();
    let write = stream.try_clone()?;
    Ok(Connection {
        reader: Box::new(TcpFrameReader {
            stream: BufReader::new(stream),
        }),
        writer: Box::new(TcpFrameWriter { stream: write }),
        local,
        peer,
    })
}

fn raw(stream: TcpStream) -> Result<Connection> {
    let local = stream.local_addr()?.to_string();
    let peer = stream.peer_addr()?.to_string();
    let write = stream.try_clone()?;
    Ok(Connection {
        reader: Box::new(RawReader { stream }),
        writer: Box::new(RawWriter { stream: write }),
        local,
        peer,
    })
}

impl Transport for TcpTransport {
    fn host(&self) -> &str {
        &self.host
    }

    fn listen(&self, port: u16) -> Result<Arc<dyn Acceptor>> {
        let listener = TcpListener::bind((self.host.as_str(), port)).map_err(|e| {
            if e.kind() == io::ErrorKind::AddrInUse {
                Error::PortInUse(format!("{}:{port}", self.host))
            } else {
                Error::Transport(format!("bind {}:{port}: {e}", self.host))
            }
        })?;
        listener.set_nonblocking(true)?;
        let port = listener.local_addr()?.port();
        Ok(Arc::new(TcpAcceptor {
            listener,
            port,
            closed: AtomicBool::new(false),
        }))
    }

    fn connect(&self, host: &str, port: u16) -> Result<Connection> {
        framed(dial(host, port)?)
    }

    fn connect_raw(&self, host: &str, port: u16) -> Result<Connection> {
        raw(dial(host, port)?)
    }
}

struct TcpAcceptor {
    listener: TcpListener,
    port: u16,
    closed: AtomicBool,
}

impl Acceptor for TcpAcceptor {
    fn port(&self) -> u16 {
        self.port
    }

    fn accept(&self, timeout: Option<Duration>) -> Result<Option<Connection>> {
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            if self.closed.load(Ordering::SeqCst) {
                return Err(Error::Transport(format!("listener on port {} closed", self.port)));
            }
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_nodelay(true).ok();
                    return framed(stream).map(Some);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if deadline.is_some_and(|d| Instant::now() >= d) {
                        return Ok(None);
                    }
                    std::thread::sleep(ACCEPT_POLL);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
    }
}

struct TcpFrameReader {
    stream: BufReader<TcpStream>,
}

impl FrameReader for TcpFrameReader {
    fn recv(&mut self) -> io::Result<Option<Vec<u8>>> {
        let mut len = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match self.stream.read(&mut len[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        let len = u32::from_be_bytes(len) as usize;
        if len > MAX_FRAME {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("frame of {len} bytes exceeds limit"),
            ));
        }
        let mut body = vec![0u8; len];
        self.stream.read_exact(&mut body)?;
        Ok(Some(body))
    }

    fn set_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.stream.get_ref().set_read_timeout(timeout)
    }
}

struct TcpFrameWriter {
    stream: TcpStream,
}

impl FrameWriter for TcpFrameWriter {
    fn send(&mut self, frame: &[u8]) -> io::Result<()> {
        let len = u32::try_from(frame.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
        let mut buf = Vec::with_capacity(frame.len() + 4);
        buf.extend_from_slice(&len.to_be_bytes());
        buf.extend_from_slice(frame);
        self.stream.write_all(&buf)
    }

    fn close(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Write);
    }
}

struct RawReader {
    stream: TcpStream,
}

impl FrameReader for RawReader {
    fn recv(&mut self) -> io::Result<Option<Vec<u8>>> {
        let mut buf = vec![0u8; 64 * 1024];
        loop {
            match self.stream.read(&mut buf) {
                Ok(0) => return Ok(None),
                Ok(n) => {
                    buf.truncate(n);
                    return Ok(Some(buf));
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
    }

    fn set_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(timeout)
    }
}

struct RawWriter {
    stream: TcpStream,
}

impl FrameWriter for RawWriter {
    fn send(&mut self, frame: &[u8]) -> io::Result<()> {
        self.stream.write_all(frame)
    }

    fn close(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Write);
    }
}
