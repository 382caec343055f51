//! Frame transports. A [`Connection`] moves discrete byte frames in both
//! directions; over TCP each frame is a 4-byte big-endian length prefix plus
//! body. Raw connections (to conventional peers) carry unframed bytes.

use std::io;
use std::sync::Arc;
use std::time::Duration;

use crate::error::{Error, Result};

mod mem;
mod tcp;

pub use mem::{pipe, SimNetwork, TraceEvent};
pub use tcp::TcpTransport;

/// Largest frame accepted from the wire.
pub const MAX_FRAME: usize = 64 * 1024 * 1024;

pub trait FrameReader: Send {
    /// Next frame, or `None` once the peer has closed its sending side.
    fn recv(&mut self) -> io::Result<Option<Vec<u8>>>;
    fn set_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()>;
}

pub trait FrameWriter: Send {
    fn send(&mut self, frame: &[u8]) -> io::Result<()>;
    /// Half-close: the peer's reader sees end of stream after pending frames.
    fn close(&mut self);
}

pub struct Connection {
    pub reader: Box<dyn FrameReader>,
    pub writer: Box<dyn FrameWriter>,
    pub local: String,
    pub peer: String,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Connection({} -> {})", self.local, self.peer)
    }
}

impl Connection {
    /// Receives one frame within `timeout`; end of stream is an error here.
    pub fn recv_within(&mut self, timeout: Duration) -> Result<Vec<u8>> {
        self.reader.set_timeout(Some(timeout))?;
        let frame = self.reader.recv();
        self.reader.set_timeout(None)?;
        match frame {
            Ok(Some(f)) => Ok(f),
            Ok(None) => Err(Error::Transport(format!("{} closed the connection", self.peer))),
            Err(e) if is_timeout(&e) => Err(Error::Timeout(format!("waiting for {}", self.peer))),
            Err(e) => Err(e.into()),
        }
    }
}

pub fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock)
}

pub trait Acceptor: Send + Sync {
    fn port(&self) -> u16;
    /// Waits for the next inbound connection. `Ok(None)` on timeout; an
    /// error once the acceptor is closed.
    fn accept(&self, timeout: Option<Duration>) -> Result<Option<Connection>>;
    fn close(&self);
}

pub trait Transport: Send + Sync {
    /// Address other parties use to reach listeners opened here.
    fn host(&self) -> &str;
    /// Opens a listener; port 0 picks an ephemeral port.
    fn listen(&self, port: u16) -> Result<Arc<dyn Acceptor>>;
    fn connect(&self, host: &str, port: u16) -> Result<Connection>;
    /// Connection to a conventional endpoint: bytes go out as written and
    /// come back in whatever chunks arrive.
    fn connect_raw(&self, host: &str, port: u16) -> Result<Connection>;
}

/// Splits `host[:port]`. A trailing `:digits` is a port; anything else
/// (including `sim://node-1`) is all host.
pub fn split_address(address: &str, default_port: u16) -> (String, u16) {
    let address = address.trim();
    if let Some((host, port)) = address.rsplit_once(':') {
        if !port.is_empty() && port.chars().all(|c| c.is_ascii_digit()) {
            if let Ok(p) = port.parse() {
                return (host.to_string(), p);
            }
        }
    }
    (address.to_string(), default_port)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn address_splitting() {
        assert_eq!(split_address("10.0.0.1:4000", 2999), ("10.0.0.1".into(), 4000));
        assert_eq!(split_address("10.0.0.1", 2999), ("10.0.0.1".into(), 2999));
        assert_eq!(split_address("sim://node-1", 2999), ("sim://node-1".into(), 2999));
        assert_eq!(split_address("sim://node-1:7", 2999), ("sim://node-1".into(), 7));
    }
}
