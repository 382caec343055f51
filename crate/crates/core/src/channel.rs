//! Asynchronous message channels.
//!
//! A [`ChannelEnd`] owns an inbox and an outbox. While unbound, writes queue
//! in the outbox and reads block. Binding attaches a transport connection:
//! the outbox is flushed onto it, later writes go straight to it, and a
//! reader thread moves incoming frames into the inbox.
//!
//! Unbinding half-closes the sending side only. The peer drains what is in
//! flight, sees end of stream, and half-closes back; so every frame sent
//! before the unbind is still delivered and nothing is lost or duplicated.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::transport::{Connection, FrameReader, FrameWriter};

pub const DEFAULT_CAPACITY: usize = 1024;

/// What happens when the bound peer goes away.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeerLoss {
    /// The end returns to the unbound state and may be bound again.
    Rebind,
    /// The end closes once the inbox is drained.
    Close,
}

struct State {
    inbox: VecDeque<Vec<u8>>,
    outbox: VecDeque<Vec<u8>>,
    link: Option<Box<dyn FrameWriter>>,
    /// True from bind until unbind or peer loss, even while a send has
    /// the link checked out.
    bound: bool,
    epoch: u64,
    /// No further writes; queued output still goes to the next binding,
    /// after which the sending side is half-closed.
    finishing: bool,
    peer_closed: bool,
    closed: bool,
}

struct Inner {
    name: String,
    policy: PeerLoss,
    capacity: usize,
    state: Mutex<State>,
    changed: Condvar,
    /// Serialises writers with bind/unbind so outbox flushes keep FIFO order.
    send_lock: Mutex<()>,
}

/// One end of a channel. Clones share the same end.
#[derive(Clone)]
pub struct ChannelEnd {
    inner: Arc<Inner>,
}

impl fmt::Debug for ChannelEnd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChannelEnd({:?}, bound={})", self.inner.name, self.is_bound())
    }
}

fn guard<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl ChannelEnd {
    pub fn new(name: impl Into<String>, policy: PeerLoss) -> Self {
        Self::with_capacity(name, policy, DEFAULT_CAPACITY)
    }

    pub fn with_capacity(name: impl Into<String>, policy: PeerLoss, capacity: usize) -> Self {
        ChannelEnd {
            inner: Arc::new(Inner {
                name: name.into(),
                policy,
                capacity: capacity.max(1),
                state: Mutex::new(State {
                    inbox: VecDeque::new(),
                    outbox: VecDeque::new(),
                    link: None,
                    bound: false,
                    epoch: 0,
                    finishing: false,
                    peer_closed: false,
                    closed: false,
                }),
                changed: Condvar::new(),
                send_lock: Mutex::new(()),
            }),
        }
    }

    /// An end already bound to `conn`, closing when the peer leaves.
    pub fn over(name: impl Into<String>, conn: Connection) -> Self {
        let end = Self::new(name, PeerLoss::Close);
        end.bind(conn).expect("fresh channel end is unbound");
        end
    }

    /// Two connected in-process ends.
    pub fn local_pair(name: &str) -> (ChannelEnd, ChannelEnd) {
        let (a, b) = crate::transport::pipe(&format!("local:{name}/a"), &format!("local:{name}/b"));
        (Self::over(name, a), Self::over(name, b))
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn same_end(&self, other: &ChannelEnd) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn is_bound(&self) -> bool {
        guard(&self.inner.state).bound
    }

    pub fn is_closed(&self) -> bool {
        guard(&self.inner.state).closed
    }

    /// Messages written here but not yet handed to a peer.
    pub fn pending_out(&self) -> usize {
        guard(&self.inner.state).outbox.len()
    }

    /// Attaches a connection. Queued outgoing messages are sent first.
    pub fn bind(&self, conn: Connection) -> Result<()> {
        self.bind_with_preamble(conn, None)
    }

    /// Like [`bind`](Self::bind), but sends `preamble` ahead of any queued
    /// message, after the end is already bound.
    pub fn bind_with_preamble(&self, conn: Connection, preamble: Option<&[u8]>) -> Result<()> {
        let Connection {
            reader, mut writer, ..
        } = conn;
        let _send = guard(&self.inner.send_lock);
        let epoch = {
            let mut st = guard(&self.inner.state);
            if st.closed || st.peer_closed {
                writer.close();
                return Err(Error::ChannelClosed);
            }
            if st.bound {
                writer.close();
                return Err(Error::AlreadyBound(self.inner.name.clone()));
            }
            if let Some(p) = preamble {
                if let Err(e) = writer.send(p) {
                    writer.close();
                    return Err(e.into());
                }
            }
            let mut undelivered = VecDeque::new();
            while let Some(msg) = st.outbox.pop_front() {
                if writer.send(&msg).is_err() {
                    undelivered.push_back(msg);
                    undelivered.extend(st.outbox.drain(..));
                    break;
                }
            }
            if !undelivered.is_empty() {
                st.outbox = undelivered;
                writer.close();
                return Err(Error::Transport("peer vanished during bind".into()));
            }
            st.epoch += 1;
            if st.finishing {
                writer.close();
            } else {
                st.link = Some(writer);
                st.bound = true;
            }
            self.inner.changed.notify_all();
            st.epoch
        };
        let inner = self.inner.clone();
        thread::Builder::new()
            .name(format!("chan-{}", self.inner.name))
            .spawn(move || pump_inbound(inner, reader, epoch))
            .map_err(|e| Error::Internal(e.to_string()))?;
        Ok(())
    }

    /// Detaches the current connection, keeping undelivered output queued.
    pub fn unbind(&self) -> Result<()> {
        let _send = guard(&self.inner.send_lock);
        let mut st = guard(&self.inner.state);
        match st.link.take() {
            Some(mut w) => {
                w.close();
                st.bound = false;
                st.epoch += 1;
                self.inner.changed.notify_all();
                Ok(())
            }
            None => Err(Error::NotBound(self.inner.name.clone())),
        }
    }

    /// Blocks while the outbox is full and no peer is attached.
    pub fn write(&self, msg: &[u8]) -> Result<()> {
        loop {
            let send = guard(&self.inner.send_lock);
            let mut st = guard(&self.inner.state);
            if st.closed || st.peer_closed || st.finishing {
                return Err(Error::ChannelClosed);
            }
            // Link changes need the send lock, so sending outside the state
            // lock cannot race a bind or unbind.
            if let Some(mut link) = st.link.take() {
                drop(st);
                let sent = link.send(msg).is_ok();
                st = guard(&self.inner.state);
                if sent {
                    st.link = Some(link);
                    return Ok(());
                }
                st.bound = false;
                st.epoch += 1;
                self.inner.changed.notify_all();
                if self.inner.policy == PeerLoss::Close {
                    st.peer_closed = true;
                    return Err(Error::ChannelClosed);
                }
            }
            if st.outbox.len() < self.inner.capacity {
                st.outbox.push_back(msg.to_vec());
                return Ok(());
            }
            drop(send);
            let _ = self
                .inner
                .changed
                .wait_timeout(st, Duration::from_millis(50))
                .unwrap_or_else(|p| p.into_inner());
        }
    }

    pub fn write_str(&self, msg: &str) -> Result<()> {
        self.write(msg.as_bytes())
    }

    /// Next message; blocks while none is available.
    pub fn read(&self) -> Result<Vec<u8>> {
        self.read_until(None)
            .map(|m| m.expect("untimed read always yields"))
    }

    pub fn read_string(&self) -> Result<String> {
        let m = self.read()?;
        String::from_utf8(m).map_err(|e| Error::Transport(format!("non-UTF-8 message: {e}")))
    }

    /// Next message, or `None` if nothing arrives within `timeout`.
    pub fn read_timeout(&self, timeout: Duration) -> Result<Option<Vec<u8>>> {
        self.read_until(Some(Instant::now() + timeout))
    }

    fn read_until(&self, deadline: Option<Instant>) -> Result<Option<Vec<u8>>> {
        let mut st = guard(&self.inner.state);
        loop {
            if let Some(m) = st.inbox.pop_front() {
                self.inner.changed.notify_all();
                return Ok(Some(m));
            }
            if st.closed || st.peer_closed {
                return Err(Error::ChannelClosed);
            }
            st = match deadline {
                None => self.inner.changed.wait(st).unwrap_or_else(|p| p.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Ok(None);
                    }
                    self.inner
                        .changed
                        .wait_timeout(st, d - now)
                        .unwrap_or_else(|p| p.into_inner())
                        .0
                }
            };
        }
    }

    /// Closes this end. The peer drains what was sent and then sees the
    /// channel closed; buffered inbound messages here are discarded.
    pub fn close(&self) {
        let _send = guard(&self.inner.send_lock);
        let mut st = guard(&self.inner.state);
        st.closed = true;
        if let Some(mut w) = st.link.take() {
            w.close();
        }
        st.bound = false;
        st.epoch += 1;
        self.inner.changed.notify_all();
    }

    /// Ends output gracefully: queued messages still reach the current or
    /// next peer, then the peer sees end of stream. Inbound stays readable.
    pub fn finish(&self) {
        let _send = guard(&self.inner.send_lock);
        let mut st = guard(&self.inner.state);
        if st.closed || st.finishing {
            return;
        }
        st.finishing = true;
        if let Some(mut w) = st.link.take() {
            w.close();
            st.bound = false;
            st.epoch += 1;
        }
        self.inner.changed.notify_all();
    }

    /// Stops accepting writes but leaves buffered inbound messages readable.
    pub fn shutdown_write(&self) {
        let _send = guard(&self.inner.send_lock);
        let mut st = guard(&self.inner.state);
        if let Some(mut w) = st.link.take() {
            w.close();
        }
        st.peer_closed = true;
        st.epoch += 1;
        self.inner.changed.notify_all();
    }
}

fn pump_inbound(inner: Arc<Inner>, mut reader: Box<dyn FrameReader>, epoch: u64) {
    while let Ok(Some(frame)) = reader.recv() {
        let mut st = guard(&inner.state);
        while st.inbox.len() >= inner.capacity && !st.closed {
            st = inner.changed.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        if st.closed {
            continue;
        }
        st.inbox.push_back(frame);
        inner.changed.notify_all();
    }
    let _send = guard(&inner.send_lock);
    let mut st = guard(&inner.state);
    if st.epoch == epoch {
        if let Some(mut w) = st.link.take() {
            w.close();
        }
        st.bound = false;
        st.epoch += 1;
        if inner.policy == PeerLoss::Close {
            st.peer_closed = true;
        }
    } else if inner.policy == PeerLoss::Close && !st.bound {
        st.peer_closed = true;
    }
    inner.changed.notify_all();
}

/// Address of a machine: node host plus its machine and resource ports.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Connector {
    pub host: String,
    pub machine_port: u16,
    pub resource_port: u16,
}

impl Connector {
    pub fn new(host: impl Into<String>, machine_port: u16, resource_port: u16) -> Self {
        Connector {
            host: host.into(),
            machine_port,
            resource_port,
        }
    }
}

impl fmt::Display for Connector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.host, self.machine_port, self.resource_port)
    }
}

impl FromStr for Connector {
    type Err = Error;

    /// The host may itself contain `-`; the two ports are the last fields.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConnector(s.to_string());
        let t = s.trim();
        let mut parts = t.rsplitn(3, '-');
        let resource = parts.next().ok_or_else(bad)?;
        let machine = parts.next().ok_or_else(bad)?;
        let host = parts.next().ok_or_else(bad)?;
        let port = |p: &str| -> Result<u16> {
            if p.is_empty() || !p.chars().all(|c| c.is_ascii_digit()) {
                return Err(bad());
            }
            p.parse().map_err(|_| bad())
        };
        if host.is_empty() {
            return Err(bad());
        }
        Ok(Connector::new(host, port(machine)?, port(resource)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::pipe;

    const PROBE: Duration = Duration::from_millis(100);

    #[test]
    fn connector_round_trip() {
        let c: Connector = "129.127.8.34-3099-4222".parse().unwrap();
        assert_eq!(c, Connector::new("129.127.8.34", 3099, 4222));
        assert_eq!(c.to_string(), "129.127.8.34-3099-4222");
        let sim: Connector = "sim://node-1-3005-3006".parse().unwrap();
        assert_eq!(sim.host, "sim://node-1");
        for bad in ["30112--29000", "a-b", "host-1-", "-1-2", "h-1-99999", "h-x-2"] {
            assert!(bad.parse::<Connector>().is_err(), "{bad}");
        }
    }

    #[test]
    fn local_pair_round_trip_in_order() {
        let (a, b) = ChannelEnd::local_pair("t");
        for i in 0..50 {
            a.write_str(&i.to_string()).unwrap();
        }
        for i in 0..50 {
            assert_eq!(b.read_string().unwrap(), i.to_string());
        }
        b.write_str("back").unwrap();
        assert_eq!(a.read_string().unwrap(), "back");
    }

    #[test]
    fn unbound_read_blocks_and_write_buffers() {
        let a = ChannelEnd::new("in", PeerLoss::Rebind);
        assert_eq!(a.read_timeout(PROBE).unwrap(), None);
        a.write_str("early").unwrap();
        assert_eq!(a.pending_out(), 1);
        let b = ChannelEnd::new("out", PeerLoss::Rebind);
        let (ca, cb) = pipe("a", "b");
        a.bind(ca).unwrap();
        b.bind(cb).unwrap();
        assert_eq!(b.read_string().unwrap(), "early");
        assert_eq!(a.pending_out(), 0);
    }

    #[test]
    fn drain_then_closed_after_peer_close() {
        let (a, b) = ChannelEnd::local_pair("t");
        a.write_str("last").unwrap();
        a.close();
        assert_eq!(b.read_string().unwrap(), "last");
        assert_eq!(b.read(), Err(Error::ChannelClosed));
        assert_eq!(a.write_str("x"), Err(Error::ChannelClosed));
    }

    #[test]
    fn unbind_is_lossless_and_rebind_reaches_new_peer() {
        let x = ChannelEnd::new("x", PeerLoss::Rebind);
        let y = ChannelEnd::new("y", PeerLoss::Rebind);
        let z = ChannelEnd::new("z", PeerLoss::Rebind);
        let (cx, cy) = pipe("x", "y");
        x.bind(cx).unwrap();
        y.bind(cy).unwrap();
        x.write_str("1").unwrap();
        x.unbind().unwrap();
        assert_eq!(x.unbind(), Err(Error::NotBound("x".into())));
        x.write_str("2").unwrap();
        assert_eq!(y.read_string().unwrap(), "1");
        assert_eq!(y.read_timeout(PROBE).unwrap(), None);
        let deadline = Instant::now() + Duration::from_secs(2);
        while y.is_bound() && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(5));
        }
        assert!(!y.is_bound());
        let (cx, cz) = pipe("x", "z");
        x.bind(cx).unwrap();
        z.bind(cz).unwrap();
        assert_eq!(z.read_string().unwrap(), "2");
        z.write_str("3").unwrap();
        assert_eq!(x.read_string().unwrap(), "3");
    }

    #[test]
    fn finish_before_bind_still_delivers() {
        let x = ChannelEnd::new("x", PeerLoss::Close);
        x.write_str("parting").unwrap();
        x.finish();
        assert_eq!(x.write_str("late"), Err(Error::ChannelClosed));
        let (cx, cy) = pipe("x", "y");
        x.bind(cx).unwrap();
        let y = ChannelEnd::over("y", cy);
        assert_eq!(y.read_string().unwrap(), "parting");
        assert_eq!(y.read(), Err(Error::ChannelClosed));
    }

    #[test]
    fn second_bind_is_rejected() {
        let x = ChannelEnd::new("x", PeerLoss::Rebind);
        let (c1, _p1) = pipe("x", "p");
        let (c2, _p2) = pipe("x", "q");
        x.bind(c1).unwrap();
        assert_eq!(x.bind(c2), Err(Error::AlreadyBound("x".into())));
    }

    #[test]
    fn writer_blocks_when_unbound_outbox_is_full() {
        let x = ChannelEnd::with_capacity("x", PeerLoss::Rebind, 2);
        x.write_str("a").unwrap();
        x.write_str("b").unwrap();
        let w = x.clone();
        let h = thread::spawn(move || w.write_str("c"));
        thread::sleep(PROBE);
        assert!(!h.is_finished());
        let y = ChannelEnd::new("y", PeerLoss::Rebind);
        let (cx, cy) = pipe("x", "y");
        x.bind(cx).unwrap();
        y.bind(cy).unwrap();
        h.join().unwrap().unwrap();
        let got: Vec<String> = (0..3).map(|_| y.read_string().unwrap()).collect();
        assert_eq!(got, ["a", "b", "c"]);
    }
}
