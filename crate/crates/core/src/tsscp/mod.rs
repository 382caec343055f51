//! Thin Server Simple Communication Protocol: frames, request/reply
//! sessions and the client calls. The listening side lives in [`crate::node`].

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use crate::bundle::Bundle;
use crate::channel::{ChannelEnd, Connector};
use crate::error::{Error, Result};
use crate::transport::{is_timeout, split_address, Connection, Transport};

pub mod frame;

pub use frame::{Body, Frame};

pub const DEFAULT_PORT: u16 = 2999;
pub const REPLY_TIMEOUT: Duration = Duration::from_secs(30);

static NEXT_CID: AtomicU64 = AtomicU64::new(1);

pub fn next_cid() -> u64 {
    NEXT_CID.fetch_add(1, Ordering::Relaxed)
}

pub fn send_frame(conn: &mut Connection, frame: &Frame) -> Result<()> {
    conn.writer.send(&frame.encode()).map_err(Error::from)
}

/// Next frame, `None` at end of stream.
pub fn recv_frame(conn: &mut Connection, timeout: Option<Duration>) -> Result<Option<Frame>> {
    conn.reader.set_timeout(timeout)?;
    let got = conn.reader.recv();
    conn.reader.set_timeout(None)?;
    match got {
        Ok(Some(bytes)) => Frame::decode(&bytes).map(Some),
        Ok(None) => Ok(None),
        Err(e) if is_timeout(&e) => Err(Error::Timeout(format!("reply from {}", conn.peer))),
        Err(e) => Err(e.into()),
    }
}

/// Sends a request and waits for the reply with the same correlation id.
/// `ERROR` replies come back as typed errors.
pub fn request(conn: &mut Connection, body: Body) -> Result<Body> {
    let cid = next_cid();
    send_frame(conn, &Frame::new(cid, body))?;
    let reply = recv_frame(conn, Some(REPLY_TIMEOUT))?
        .ok_or_else(|| Error::Transport(format!("{} closed before replying", conn.peer)))?;
    if reply.cid != cid {
        return Err(Error::Transport(format!(
            "reply cid {} does not match request {cid}",
            reply.cid
        )));
    }
    reply.into_result()
}

fn unexpected(body: &Body) -> Error {
    Error::Transport(format!("unexpected {} reply", body.kind()))
}

/// A freshly fired or connected machine as seen by its client.
#[derive(Debug, Clone)]
pub struct ClientHandle {
    pub channel: ChannelEnd,
    pub connector: Connector,
}

/// A node that is not listening counts as unreachable.
fn dial_node(transport: &dyn Transport, address: &str) -> Result<Connection> {
    let (host, port) = split_address(address, DEFAULT_PORT);
    transport.connect(&host, port).map_err(|e| match e {
        Error::ConnectionRefused(a) => Error::HostUnreachable(a),
        e => e,
    })
}

/// Fires `bundle` at the node at `address`. The returned channel is the
/// fired machine's default channel.
pub fn client_send_fire(
    transport: &dyn Transport,
    address: &str,
    bundle: &Bundle,
) -> Result<ClientHandle> {
    let mut conn = dial_node(transport, address)?;
    let reply = request(
        &mut conn,
        Body::Fire {
            bundle: Box::new(bundle.clone()),
        },
    )?;
    match reply {
        Body::FireReply { connector } => Ok(ClientHandle {
            channel: ChannelEnd::over("default", conn),
            connector,
        }),
        other => Err(unexpected(&other)),
    }
}

/// Sends a channel request to a machine's connection manager.
pub fn client_machine_request(
    transport: &dyn Transport,
    connector: &Connector,
    body: Body,
) -> Result<Body> {
    if !matches!(
        body,
        Body::ChannelListen { .. }
            | Body::ChannelConnect { .. }
            | Body::ChannelUnbind { .. }
            | Body::ChannelCancel { .. }
    ) {
        return Err(Error::Internal(format!(
            "{} is not a machine channel request",
            body.kind()
        )));
    }
    let mut conn = transport.connect(&connector.host, connector.machine_port)?;
    let reply = request(&mut conn, body);
    conn.writer.close();
    reply
}

/// Opens a channel to the resource port of the machine at `connector`.
pub fn open_resource_channel(
    transport: &dyn Transport,
    connector: &Connector,
    name: &str,
) -> Result<ChannelEnd> {
    let mut conn = transport.connect(&connector.host, connector.resource_port)?;
    match request(
        &mut conn,
        Body::Hello {
            node: transport.host().to_string(),
            channel: name.to_string(),
        },
    )? {
        Body::Ack => Ok(ChannelEnd::over(name, conn)),
        other => Err(unexpected(&other)),
    }
}

/// Resolves `resource` on the node at `address` and opens a channel to it.
pub fn resource_connect_remote(
    transport: &dyn Transport,
    address: &str,
    resource: &str,
    provider: &str,
) -> Result<ClientHandle> {
    let mut conn = dial_node(transport, address)?;
    let reply = request(
        &mut conn,
        Body::ResourceConnect {
            resource: resource.to_string(),
            provider: provider.to_string(),
        },
    );
    conn.writer.close();
    match reply? {
        Body::ResourceReply { connector } => Ok(ClientHandle {
            channel: open_resource_channel(transport, &connector, resource)?,
            connector,
        }),
        other => Err(unexpected(&other)),
    }
}
