//! In-process pipes and the simulated network built on them.
//!
//! The simulated network hands out one [`Transport`] per synthetic host
//! (`sim://node-k`). Every frame written on a simulated connection is
//! appended to a single trace log, which totally orders all frames.

use std::collections::{HashMap, VecDeque};
use std::io;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::{Acceptor, Connection, FrameReader, FrameWriter, Transport};
use crate::error::{Error, Result};

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Default)]
struct QueueState {
    frames: VecDeque<Vec<u8>>,
    writer_closed: bool,
    reader_gone: bool,
}

#[derive(Default)]
struct Queue {
    state: Mutex<QueueState>,
    ready: Condvar,
}

type Tap = Arc<dyn Fn(&[u8]) + Send + Sync>;

struct PipeWriter {
    queue: Arc<Queue>,
    tap: Option<Tap>,
}

impl FrameWriter for PipeWriter {
    fn send(&mut self, frame: &[u8]) -> io::Result<()> {
        let mut st = lock(&self.queue.state);
        if st.writer_closed || st.reader_gone {
            return Err(io::ErrorKind::BrokenPipe.into());
        }
        if let Some(tap) = &self.tap {
            tap(frame);
        }
        st.frames.push_back(frame.to_vec());
        self.queue.ready.notify_all();
        Ok(())
    }

    fn close(&mut self) {
        let mut st = lock(&self.queue.state);
        st.writer_closed = true;
        self.queue.ready.notify_all();
    }
}

impl Drop for PipeWriter {
    fn drop(&mut self) {
        self.close();
    }
}

struct PipeReader {
    queue: Arc<Queue>,
    timeout: Option<Duration>,
}

impl FrameReader for PipeReader {
    fn recv(&mut self) -> io::Result<Option<Vec<u8>>> {
        let deadline = self.timeout.map(|t| Instant::now() + t);
        let mut st = lock(&self.queue.state);
        loop {
            if let Some(f) = st.frames.pop_front() {
                return Ok(Some(f));
            }
            if st.writer_closed {
                return Ok(None);
            }
            st = match deadline {
                None => self.queue.ready.wait(st).unwrap_or_else(|p| p.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(io::ErrorKind::TimedOut.into());
                    }
                    self.queue
                        .ready
                        .wait_timeout(st, d - now)
                        .unwrap_or_else(|p| p.into_inner())
                        .0
                }
            };
        }
    }

    fn set_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.timeout = timeout;
        Ok(())
    }
}

impl Drop for PipeReader {
    fn drop(&mut self) {
        lock(&self.queue.state).reader_gone = true;
    }
}

fn half(tap: Option<Tap>) -> (PipeWriter, PipeReader) {
    let queue = Arc::new(Queue::default());
    (
        PipeWriter {
            queue: queue.clone(),
            tap,
        },
        PipeReader {
            queue,
            timeout: None,
        },
    )
}

fn pair(a: &str, b: &str, tap_ab: Option<Tap>, tap_ba: Option<Tap>) -> (Connection, Connection) {
    let (w_ab, r_ab) = half(tap_ab);
    let (w_ba, r_ba) = half(tap_ba);
    (
        Connection {
            reader: Box::new(r_ba),
            writer: Box::new(w_ab),
            local: a.to_string(),
            peer: b.to_string(),
        },
        Connection {
            reader: Box::new(r_ab),
            writer: Box::new(w_ba),
            local: b.to_string(),
            peer: a.to_string(),
        },
    )
}

/// An untraced in-process connection pair.
pub fn pipe(a: &str, b: &str) -> (Connection, Connection) {
    pair(a, b, None, None)
}

/// One frame observed on the simulated network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    /// `host:port` of the sending end.
    pub from: String,
    /// `host:port` of the receiving end.
    pub to: String,
    pub frame: Vec<u8>,
}

#[derive(Default)]
struct AcceptQueue {
    pending: VecDeque<Connection>,
    closed: bool,
}

struct SimAcceptor {
    network: Arc<SimInner>,
    host: String,
    port: u16,
    queue: Mutex<AcceptQueue>,
    ready: Condvar,
}

impl Acceptor for SimAcceptor {
    fn port(&self) -> u16 {
        self.port
    }

    fn accept(&self, timeout: Option<Duration>) -> Result<Option<Connection>> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut q = lock(&self.queue);
        loop {
            if q.closed {
                return Err(Error::Transport(format!("listener {}:{} closed", self.host, self.port)));
            }
            if let Some(c) = q.pending.pop_front() {
                return Ok(Some(c));
            }
            q = match deadline {
                None => self.ready.wait(q).unwrap_or_else(|p| p.into_inner()),
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Ok(None);
                    }
                    self.ready
                        .wait_timeout(q, d - now)
                        .unwrap_or_else(|p| p.into_inner())
                        .0
                }
            };
        }
    }

    fn close(&self) {
        {
            let mut q = lock(&self.queue);
            if q.closed {
                return;
            }
            q.closed = true;
            q.pending.clear();
            self.ready.notify_all();
        }
        let mut hosts = lock(&self.network.hosts);
        if let Some(h) = hosts.get_mut(&self.host) {
            if h.listeners
                .get(&self.port)
                .is_some_and(|l| std::ptr::eq(Arc::as_ptr(l), self))
            {
                h.listeners.remove(&self.port);
            }
        }
    }
}

struct SimHost {
    listeners: HashMap<u16, Arc<SimAcceptor>>,
    next_port: u16,
    down: bool,
}

struct SimInner {
    hosts: Mutex<HashMap<String, SimHost>>,
    trace: Mutex<Vec<TraceEvent>>,
    seq: AtomicU64,
    port_base: u16,
}

impl SimInner {
    fn allocate(&self, host: &mut SimHost) -> u16 {
        loop {
            let p = host.next_port;
            host.next_port = host.next_port.checked_add(1).unwrap_or(self.port_base);
            if !host.listeners.contains_key(&p) {
                return p;
            }
        }
    }

    fn tap(self: &Arc<Self>, from: String, to: String) -> Tap {
        let net = self.clone();
        Arc::new(move |frame: &[u8]| {
            let mut trace = lock(&net.trace);
            let seq = net.seq.fetch_add(1, Ordering::SeqCst);
            trace.push(TraceEvent {
                seq,
                from: from.clone(),
                to: to.clone(),
                frame: frame.to_vec(),
            });
        })
    }
}

/// Deterministic in-process network of synthetic hosts.
#[derive(Clone)]
pub struct SimNetwork {
    inner: Arc<SimInner>,
}

impl SimNetwork {
    /// The seed only shifts where ephemeral port numbering starts.
    pub fn new(seed: u64) -> Self {
        let port_base = 3000 + (seed % 1000) as u16 * 10;
        SimNetwork {
            inner: Arc::new(SimInner {
                hosts: Mutex::new(HashMap::new()),
                trace: Mutex::new(Vec::new()),
                seq: AtomicU64::new(0),
                port_base,
            }),
        }
    }

    /// Transport for `host`, registering the host on first use.
    pub fn endpoint(&self, host: &str) -> Arc<dyn Transport> {
        let mut hosts = lock(&self.inner.hosts);
        hosts.entry(host.to_string()).or_insert_with(|| SimHost {
            listeners: HashMap::new(),
            next_port: self.inner.port_base,
            down: false,
        });
        Arc::new(SimTransport {
            network: self.inner.clone(),
            host: host.to_string(),
        })
    }

    /// A down host refuses every new dial with `HostUnreachable`.
    pub fn set_down(&self, host: &str, down: bool) {
        if let Some(h) = lock(&self.inner.hosts).get_mut(host) {
            h.down = down;
        }
    }

    pub fn trace(&self) -> Vec<TraceEvent> {
        lock(&self.inner.trace).clone()
    }

    pub fn clear_trace(&self) {
        lock(&self.inner.trace).clear();
    }
}

struct SimTransport {
    network: Arc<SimInner>,
    host: String,
}

impl SimTransport {
    fn dial(&self, host: &str, port: u16) -> Result<Connection> {
        let (acceptor, local_port) = {
            let mut hosts = lock(&self.network.hosts);
            let target = hosts
                .get(host)
                .filter(|h| !h.down)
                .ok_or_else(|| Error::HostUnreachable(host.to_string()))?;
            let acceptor = target
                .listeners
                .get(&port)
                .cloned()
                .ok_or_else(|| Error::ConnectionRefused(format!("{host}:{port}")))?;
            let me = hosts
                .get_mut(&self.host)
                .ok_or_else(|| Error::HostUnreachable(self.host.clone()))?;
            let local_port = self.network.allocate(me);
            (acceptor, local_port)
        };
        let local = format!("{}:{local_port}", self.host);
        let remote = format!("{host}:{port}");
        let (mine, theirs) = pair(
            &local,
            &remote,
            Some(self.network.tap(local.clone(), remote.clone())),
            Some(self.network.tap(remote.clone(), local.clone())),
        );
        let mut q = lock(&acceptor.queue);
        if q.closed {
            return Err(Error::ConnectionRefused(remote));
        }
        q.pending.push_back(theirs);
        acceptor.ready.notify_all();
        Ok(mine)
    }
}

impl Transport for SimTransport {
    fn host(&self) -> &str {
        &self.host
    }

    fn listen(&self, port: u16) -> Result<Arc<dyn Acceptor>> {
        let mut hosts = lock(&self.network.hosts);
        let me = hosts
            .get_mut(&self.host)
            .ok_or_else(|| Error::HostUnreachable(self.host.clone()))?;
        let port = if port == 0 {
            self.network.allocate(me)
        } else if me.listeners.contains_key(&port) {
            return Err(Error::PortInUse(format!("{}:{port}", self.host)));
        } else {
            port
        };
        let acceptor = Arc::new(SimAcceptor {
            network: self.network.clone(),
            host: self.host.clone(),
            port,
            queue: Mutex::new(AcceptQueue::default()),
            ready: Condvar::new(),
        });
        me.listeners.insert(port, acceptor.clone());
        Ok(acceptor)
    }

    fn connect(&self, host: &str, port: u16) -> Result<Connection> {
        self.dial(host, port)
    }

    fn connect_raw(&self, host: &str, port: u16) -> Result<Connection> {
        self.dial(host, port)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipe_delivers_in_order_then_eof() {
        let (mut a, mut b) = pipe("a", "b");
        a.writer.send(b"1").unwrap();
        a.writer.send(b"2").unwrap();
        a.writer.close();
        assert_eq!(b.reader.recv().unwrap(), Some(b"1".to_vec()));
        assert_eq!(b.reader.recv().unwrap(), Some(b"2".to_vec()));
        assert_eq!(b.reader.recv().unwrap(), None);
        assert!(a.writer.send(b"3").is_err());
    }

    #[test]
    fn pipe_timeout() {
        let (_a, mut b) = pipe("a", "b");
        b.reader.set_timeout(Some(Duration::from_millis(20))).unwrap();
        assert!(super::super::is_timeout(&b.reader.recv().unwrap_err()));
    }

    #[test]
    fn sim_dial_accept_and_trace() {
        let net = SimNetwork::new(0);
        let n1 = net.endpoint("sim://node-1");
        let n2 = net.endpoint("sim://node-2");
        let acc = n2.listen(0).unwrap();
        let mut c = n1.connect("sim://node-2", acc.port()).unwrap();
        let mut s = acc.accept(Some(Duration::from_secs(1))).unwrap().unwrap();
        c.writer.send(b"ping").unwrap();
        assert_eq!(s.reader.recv().unwrap().unwrap(), b"ping");
        s.writer.send(b"pong").unwrap();
        assert_eq!(c.reader.recv().unwrap().unwrap(), b"pong");
        let trace = net.trace();
        assert_eq!(trace.len(), 2);
        assert_eq!(trace[0].to, format!("sim://node-2:{}", acc.port()));
        assert!(trace[0].from.starts_with("sim://node-1:"));
        assert_eq!(trace[1].frame, b"pong");
    }

    #[test]
    fn sim_errors() {
        let net = SimNetwork::new(0);
        let n1 = net.endpoint("sim://node-1");
        let _n2 = net.endpoint("sim://node-2");
        assert!(matches!(
            n1.connect("sim://node-9", 1),
            Err(Error::HostUnreachable(_))
        ));
        assert!(matches!(
            n1.connect("sim://node-2", 1),
            Err(Error::ConnectionRefused(_))
        ));
        let acc = n1.listen(5000).unwrap();
        assert!(matches!(n1.listen(5000), Err(Error::PortInUse(_))));
        net.set_down("sim://node-1", true);
        assert!(matches!(
            net.endpoint("sim://node-2").connect("sim://node-1", 5000),
            Err(Error::HostUnreachable(_))
        ));
        acc.close();
        assert!(acc.accept(None).is_err());
        net.set_down("sim://node-1", false);
        assert!(matches!(
            net.endpoint("sim://node-2").connect("sim://node-1", 5000),
            Err(Error::ConnectionRefused(_))
        ));
    }
}
