//! Per-machine connection manager: the named-channel table, pending
//! listeners, and the third-party wiring protocol built on them.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use crate::channel::{ChannelEnd, Connector, PeerLoss};
use crate::error::{Error, Result};
use crate::transport::{Acceptor, Transport};
use crate::tsscp::{self, Body, Frame};

pub const DEFAULT_LISTEN_TIMEOUT: Duration = Duration::from_secs(30);

fn guard<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

struct Inner {
    node: String,
    transport: Arc<dyn Transport>,
    listen_timeout: Duration,
    named: Mutex<HashMap<String, ChannelEnd>>,
    pending: Mutex<HashMap<String, Arc<dyn Acceptor>>>,
}

#[derive(Clone)]
pub struct ConnectionManager {
    inner: Arc<Inner>,
}

impl ConnectionManager {
    pub fn new(node: impl Into<String>, transport: Arc<dyn Transport>) -> Self {
        Self::with_listen_timeout(node, transport, DEFAULT_LISTEN_TIMEOUT)
    }

    pub fn with_listen_timeout(
        node: impl Into<String>,
        transport: Arc<dyn Transport>,
        listen_timeout: Duration,
    ) -> Self {
        ConnectionManager {
            inner: Arc::new(Inner {
                node: node.into(),
                transport,
                listen_timeout,
                named: Mutex::new(HashMap::new()),
                pending: Mutex::new(HashMap::new()),
            }),
        }
    }

    /// The named channel, created unbound on first use.
    pub fn channel(&self, name: &str) -> ChannelEnd {
        guard(&self.inner.named)
            .entry(name.to_string())
            .or_insert_with(|| ChannelEnd::new(name, PeerLoss::Rebind))
            .clone()
    }

    pub fn is_pending(&self, name: &str) -> bool {
        guard(&self.inner.pending).contains_key(name)
    }

    fn ensure_free(&self, name: &str) -> Result<ChannelEnd> {
        let end = self.channel(name);
        if end.is_bound() || self.is_pending(name) {
            return Err(Error::AlreadyBound(name.to_string()));
        }
        Ok(end)
    }

    /// Opens an ephemeral listener that binds `name` to the first peer that
    /// completes the handshake, and returns its port.
    pub fn listen_for_connection(&self, name: &str) -> Result<u16> {
        let (end, acceptor) = {
            let mut pending = guard(&self.inner.pending);
            let end = self.channel(name);
            if end.is_bound() || pending.contains_key(name) {
                return Err(Error::AlreadyBound(name.to_string()));
            }
            let acceptor = self.inner.transport.listen(0)?;
            pending.insert(name.to_string(), acceptor.clone());
            (end, acceptor)
        };
        let port = acceptor.port();
        let inner = self.inner.clone();
        let name = name.to_string();
        thread::Builder::new()
            .name(format!("listen-{name}"))
            .spawn(move || {
                await_binding(&inner, &name, &end, &acceptor);
                let mut pending = guard(&inner.pending);
                if pending
                    .get(&name)
                    .is_some_and(|a| Arc::ptr_eq(a, &acceptor))
                {
                    pending.remove(&name);
                }
                acceptor.close();
            })
            .map_err(|e| Error::Internal(e.to_string()))?;
        Ok(port)
    }

    /// Dials a pending listener and binds `name` to it. `Ok(false)` when
    /// the listener is gone or the handshake fails.
    pub fn connect_to_name(&self, host: &str, port: u16, name: &str) -> Result<bool> {
        let end = self.ensure_free(name)?;
        let mut conn = match self.inner.transport.connect(host, port) {
            Ok(c) => c,
            Err(Error::ConnectionRefused(_)) => return Ok(false),
            Err(e) => return Err(e),
        };
        let hello = Body::Hello {
            node: self.inner.node.clone(),
            channel: name.to_string(),
        };
        match tsscp::request(&mut conn, hello) {
            Ok(Body::Ack) => {}
            _ => return Ok(false),
        }
        match end.bind(conn) {
            Ok(()) => Ok(true),
            Err(Error::AlreadyBound(n)) => Err(Error::AlreadyBound(n)),
            Err(_) => Ok(false),
        }
    }

    pub fn unbind(&self, name: &str) -> Result<()> {
        match guard(&self.inner.named).get(name) {
            Some(end) => end.unbind(),
            None => Err(Error::NotBound(name.to_string())),
        }
    }

    /// Withdraws a pending listener. Returns whether one existed.
    pub fn cancel(&self, name: &str) -> bool {
        let acceptor = guard(&self.inner.pending).remove(name);
        match acceptor {
            Some(a) => {
                a.close();
                true
            }
            None => false,
        }
    }

    fn cancel_all(&self) {
        let pending: Vec<_> = guard(&self.inner.pending).drain().collect();
        for (_, a) in pending {
            a.close();
        }
    }

    /// Ends every named channel gracefully and drops pending listeners.
    pub fn finish_all(&self) {
        self.cancel_all();
        for end in guard(&self.inner.named).values() {
            end.finish();
        }
    }

    /// Closes every named channel outright, waking blocked readers.
    pub fn close_all(&self) {
        self.cancel_all();
        for end in guard(&self.inner.named).values() {
            end.close();
        }
    }

    /// Serves one machine-channel request.
    pub fn handle(&self, body: Body) -> Body {
        let result = match body {
            Body::ChannelListen { channel } => self
                .listen_for_connection(&channel)
                .map(|port| Body::ListenReply { port }),
            Body::ChannelConnect {
                channel,
                host,
                port,
            } => self
                .connect_to_name(&host, port, &channel)
                .map(|ok| Body::ConnectReply { ok }),
            Body::ChannelUnbind { channel } => self.unbind(&channel).map(|_| Body::UnbindReply),
            Body::ChannelCancel { channel } => {
                self.cancel(&channel);
                Ok(Body::CancelReply)
            }
            other => Err(Error::MalformedDocument(format!(
                "{} is not a machine channel request",
                other.kind()
            ))),
        };
        result.unwrap_or_else(|e| Body::error(&e))
    }
}

fn await_binding(inner: &Inner, name: &str, end: &ChannelEnd, acceptor: &Arc<dyn Acceptor>) {
    let deadline = Instant::now() + inner.listen_timeout;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return;
        }
        let mut conn = match acceptor.accept(Some(left)) {
            Ok(Some(c)) => c,
            Ok(None) | Err(_) => return,
        };
        let hello = match tsscp::recv_frame(&mut conn, Some(left)) {
            Ok(Some(f)) => f,
            _ => continue,
        };
        if !matches!(hello.body, Body::Hello { .. }) {
            let reply = Frame::new(
                hello.cid,
                Body::error(&Error::MalformedDocument("expected HELLO".into())),
            );
            let _ = tsscp::send_frame(&mut conn, &reply);
            continue;
        }
        let ack = Frame::new(hello.cid, Body::Ack).encode();
        match end.bind_with_preamble(conn, Some(&ack)) {
            Ok(()) => {
                tracing::debug!(channel = name, "named channel bound");
                return;
            }
            Err(_) => return,
        }
    }
}

/// Connects `primary_name` on the primary machine to `secondary_name` on the
/// secondary: LISTEN at the primary, then CONNECT at the secondary, which
/// dials the primary's listener. A failed CONNECT cancels the listener.
pub fn wire_third_party(
    transport: &dyn Transport,
    primary: &Connector,
    primary_name: &str,
    secondary: &Connector,
    secondary_name: &str,
) -> Result<()> {
    let fail = |step: &str, e: &dyn std::fmt::Display| {
        Error::WireFailed(format!(
            "{primary_name} at {primary} to {secondary_name} at {secondary}: {step}: {e}"
        ))
    };
    let listen = Body::ChannelListen {
        channel: primary_name.to_string(),
    };
    let port = match tsscp::client_machine_request(transport, primary, listen) {
        Ok(Body::ListenReply { port }) => port,
        Ok(other) => return Err(fail("listen", &other.kind())),
        Err(e) => return Err(fail("listen", &e)),
    };
    let connect = Body::ChannelConnect {
        channel: secondary_name.to_string(),
        host: primary.host.clone(),
        port,
    };
    let outcome = match tsscp::client_machine_request(transport, secondary, connect) {
        Ok(Body::ConnectReply { ok: true }) => return Ok(()),
        Ok(Body::ConnectReply { ok: false }) => fail("connect", &"handshake refused"),
        Ok(other) => fail("connect", &other.kind()),
        Err(e) => fail("connect", &e),
    };
    let cancel = Body::ChannelCancel {
        channel: primary_name.to_string(),
    };
    let _ = tsscp::client_machine_request(transport, primary, cancel);
    Err(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::SimNetwork;

    const PROBE: Duration = Duration::from_millis(100);

    fn pair() -> (SimNetwork, ConnectionManager, ConnectionManager) {
        let net = SimNetwork::new(1);
        let a = ConnectionManager::new("sim://a", net.endpoint("sim://a"));
        let b = ConnectionManager::new("sim://b", net.endpoint("sim://b"));
        (net, a, b)
    }

    #[test]
    fn listen_connect_binds_both_ways() {
        let (_net, a, b) = pair();
        a.channel("in").write_str("queued").unwrap();
        let port = a.listen_for_connection("in").unwrap();
        assert!(matches!(
            a.listen_for_connection("in"),
            Err(Error::AlreadyBound(_))
        ));
        assert!(b.connect_to_name("sim://a", port, "out").unwrap());
        assert!(a.channel("in").is_bound());
        assert_eq!(b.channel("out").read_string().unwrap(), "queued");
        b.channel("out").write_str("reply").unwrap();
        assert_eq!(a.channel("in").read_string().unwrap(), "reply");
        assert!(matches!(
            b.connect_to_name("sim://a", port, "out"),
            Err(Error::AlreadyBound(_))
        ));
    }

    #[test]
    fn expired_or_cancelled_listener_refuses() {
        let net = SimNetwork::new(1);
        let a = ConnectionManager::with_listen_timeout(
            "sim://a",
            net.endpoint("sim://a"),
            Duration::from_millis(50),
        );
        let b = ConnectionManager::new("sim://b", net.endpoint("sim://b"));
        let port = a.listen_for_connection("in").unwrap();
        thread::sleep(Duration::from_millis(200));
        assert!(!a.is_pending("in"));
        assert!(!b.connect_to_name("sim://a", port, "out").unwrap());

        let port = a.listen_for_connection("in2").unwrap();
        assert!(a.cancel("in2"));
        assert!(!b.connect_to_name("sim://a", port, "out").unwrap());
        assert!(matches!(
            b.connect_to_name("sim://nowhere", port, "out"),
            Err(Error::HostUnreachable(_))
        ));
    }

    #[test]
    fn unbind_then_rebind_elsewhere() {
        let net = SimNetwork::new(2);
        let a = ConnectionManager::new("sim://a", net.endpoint("sim://a"));
        let b = ConnectionManager::new("sim://b", net.endpoint("sim://b"));
        let c = ConnectionManager::new("sim://c", net.endpoint("sim://c"));
        let port = a.listen_for_connection("x").unwrap();
        assert!(b.connect_to_name("sim://a", port, "y").unwrap());
        a.channel("x").write_str("1").unwrap();
        assert_eq!(b.channel("y").read_string().unwrap(), "1");
        a.unbind("x").unwrap();
        assert!(matches!(a.unbind("x"), Err(Error::NotBound(_))));
        a.channel("x").write_str("2").unwrap();
        assert_eq!(b.channel("y").read_timeout(PROBE).unwrap(), None);
        let port = a.listen_for_connection("x").unwrap();
        assert!(c.connect_to_name("sim://a", port, "z").unwrap());
        assert_eq!(c.channel("z").read_string().unwrap(), "2");
    }
}
