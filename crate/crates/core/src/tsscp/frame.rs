//! TSSCP frame codec. A frame body is one version byte followed by a
//! canonical `<TSSCP>` element; transports add the length prefix.

use crate::bundle::Bundle;
use crate::channel::Connector;
use crate::doc::{self, Element};
use crate::error::{Error, Result};

pub const VERSION: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Fire { bundle: Box<Bundle> },
    FireReply { connector: Connector },
    ResourceConnect { resource: String, provider: String },
    ResourceReply { connector: Connector },
    ChannelListen { channel: String },
    ListenReply { port: u16 },
    ChannelConnect { channel: String, host: String, port: u16 },
    ConnectReply { ok: bool },
    ChannelUnbind { channel: String },
    UnbindReply,
    ChannelCancel { channel: String },
    CancelReply,
    Hello { node: String, channel: String },
    Ack,
    Error { code: u16, message: String },
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::Fire { .. } => "FIRE",
            Body::FireReply { .. } => "FIRE_REPLY",
            Body::ResourceConnect { .. } => "RESOURCE_CONNECT",
            Body::ResourceReply { .. } => "RESOURCE_REPLY",
            Body::ChannelListen { .. } => "CHANNEL_LISTEN",
            Body::ListenReply { .. } => "LISTEN_REPLY",
            Body::ChannelConnect { .. } => "CHANNEL_CONNECT",
            Body::ConnectReply { .. } => "CONNECT_REPLY",
            Body::ChannelUnbind { .. } => "CHANNEL_UNBIND",
            Body::UnbindReply => "UNBIND_REPLY",
            Body::ChannelCancel { .. } => "CHANNEL_CANCEL",
            Body::CancelReply => "CANCEL_REPLY",
            Body::Hello { .. } => "HELLO",
            Body::Ack => "ACK",
            Body::Error { .. } => "ERROR",
        }
    }

    pub fn is_request(&self) -> bool {
        matches!(
            self,
            Body::Fire { .. }
                | Body::ResourceConnect { .. }
                | Body::ChannelListen { .. }
                | Body::ChannelConnect { .. }
                | Body::ChannelUnbind { .. }
                | Body::ChannelCancel { .. }
                | Body::Hello { .. }
        )
    }

    pub fn error(e: &Error) -> Body {
        Body::Error {
            code: e.code(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub cid: u64,
    pub body: Body,
}

fn port_attr(e: &Element, key: &str) -> Result<u16> {
    let v = e.required_attr(key)?;
    v.parse()
        .map_err(|_| Error::malformed(format!("{key}={v:?} is not a port")))
}

impl Frame {
    pub fn new(cid: u64, body: Body) -> Self {
        Frame { cid, body }
    }

    pub fn to_element(&self) -> Element {
        let e = Element::new("TSSCP")
            .with_attr("cid", self.cid.to_string())
            .with_attr("type", self.body.kind());
        match &self.body {
            Body::Fire { bundle } => e.with_child(bundle.to_element()),
            Body::FireReply { connector } | Body::ResourceReply { connector } => {
                e.with_attr("connector", connector.to_string())
            }
            Body::ResourceConnect { resource, provider } => e
                .with_attr("provider", provider.as_str())
                .with_attr("resource", resource.as_str()),
            Body::ChannelListen { channel }
            | Body::ChannelUnbind { channel }
            | Body::ChannelCancel { channel } => e.with_attr("channel", channel.as_str()),
            Body::ListenReply { port } => e.with_attr("port", port.to_string()),
            Body::ChannelConnect {
                channel,
                host,
                port,
            } => e
                .with_attr("channel", channel.as_str())
                .with_attr("host", host.as_str())
                .with_attr("port", port.to_string()),
            Body::ConnectReply { ok } => e.with_attr("ok", if *ok { "TRUE" } else { "FALSE" }),
            Body::Hello { node, channel } => e
                .with_attr("channel", channel.as_str())
                .with_attr("node", node.as_str()),
            Body::UnbindReply | Body::CancelReply | Body::Ack => e,
            Body::Error { code, message } => e
                .with_attr("code", code.to_string())
                .with_attr("message", message.as_str()),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![VERSION];
        out.extend(self.to_element().to_canonical_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let (&version, rest) = bytes
            .split_first()
            .ok_or_else(|| Error::malformed("empty TSSCP frame"))?;
        if version != VERSION {
            return Err(Error::malformed(format!("unsupported TSSCP version {version}")));
        }
        let e = doc::parse(rest)?;
        e.expect_name("TSSCP")?;
        let cid_text = e.required_attr("cid")?;
        let cid = cid_text
            .parse()
            .map_err(|_| Error::malformed(format!("cid={cid_text:?} is not a number")))?;
        let s = |k: &str| e.required_attr(k).map(str::to_string);
        let body = match e.required_attr("type")? {
            "FIRE" => Body::Fire {
                bundle: Box::new(Bundle::from_element(e.required_child("BUNDLE")?)?),
            },
            "FIRE_REPLY" => Body::FireReply {
                connector: e.required_attr("connector")?.parse()?,
            },
            "RESOURCE_CONNECT" => Body::ResourceConnect {
                resource: s("resource")?,
                provider: e.attr("provider").unwrap_or_default().to_string(),
            },
            "RESOURCE_REPLY" => Body::ResourceReply {
                connector: e.required_attr("connector")?.parse()?,
            },
            "CHANNEL_LISTEN" => Body::ChannelListen {
                channel: s("channel")?,
            },
            "LISTEN_REPLY" => Body::ListenReply {
                port: port_attr(&e, "port")?,
            },
            "CHANNEL_CONNECT" => Body::ChannelConnect {
                channel: s("channel")?,
                host: s("host")?,
                port: port_attr(&e, "port")?,
            },
            "CONNECT_REPLY" => Body::ConnectReply {
                ok: e.required_attr("ok")?.eq_ignore_ascii_case("TRUE"),
            },
            "CHANNEL_UNBIND" => Body::ChannelUnbind {
                channel: s("channel")?,
            },
            "UNBIND_REPLY" => Body::UnbindReply,
            "CHANNEL_CANCEL" => Body::ChannelCancel {
                channel: s("channel")?,
            },
            "CANCEL_REPLY" => Body::CancelReply,
            "HELLO" => Body::Hello {
                node: s("node")?,
                channel: s("channel")?,
            },
            "ACK" => Body::Ack,
            "ERROR" => {
                let code_text = e.required_attr("code")?;
                Body::Error {
                    code: code_text
                        .parse()
                        .map_err(|_| Error::malformed(format!("bad error code {code_text:?}")))?,
                    message: e.attr("message").unwrap_or_default().to_string(),
                }
            }
            other => return Err(Error::malformed(format!("unknown TSSCP type {other:?}"))),
        };
        Ok(Frame { cid, body })
    }

    /// Turns an `ERROR` reply into the matching typed error.
    pub fn into_result(self) -> Result<Body> {
        match self.body {
            Body::Error { code, message } => Err(Error::from_remote(code, message)),
            b => Ok(b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::CodeSection;

    fn golden(body: Body, expected: &str) {
        let f = Frame::new(7, body);
        let bytes = f.encode();
        assert_eq!(bytes[0], 0x01);
        assert_eq!(std::str::from_utf8(&bytes[1..]).unwrap(), expected);
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
    }

    #[test]
    fn golden_bytes() {
        golden(
            Body::ChannelListen {
                channel: "in".into(),
            },
            r#"<TSSCP channel="in" cid="7" type="CHANNEL_LISTEN"/>"#,
        );
        golden(
            Body::ListenReply { port: 40123 },
            r#"<TSSCP cid="7" port="40123" type="LISTEN_REPLY"/>"#,
        );
        golden(
            Body::ChannelConnect {
                channel: "out".into(),
                host: "10.0.0.2".into(),
                port: 40123,
            },
            r#"<TSSCP channel="out" cid="7" host="10.0.0.2" port="40123" type="CHANNEL_CONNECT"/>"#,
        );
        golden(
            Body::ConnectReply { ok: true },
            r#"<TSSCP cid="7" ok="TRUE" type="CONNECT_REPLY"/>"#,
        );
        golden(
            Body::FireReply {
                connector: Connector::new("129.127.8.34", 3099, 4222),
            },
            r#"<TSSCP cid="7" connector="129.127.8.34-3099-4222" type="FIRE_REPLY"/>"#,
        );
        golden(
            Body::ResourceConnect {
                resource: "db".into(),
                provider: "".into(),
            },
            r#"<TSSCP cid="7" provider="" resource="db" type="RESOURCE_CONNECT"/>"#,
        );
        golden(
            Body::Hello {
                node: "sim://node-1".into(),
                channel: "x".into(),
            },
            r#"<TSSCP channel="x" cid="7" node="sim://node-1" type="HELLO"/>"#,
        );
        golden(Body::Ack, r#"<TSSCP cid="7" type="ACK"/>"#);
        golden(
            Body::Error {
                code: 401,
                message: "bundle is not signed".into(),
            },
            r#"<TSSCP cid="7" code="401" message="bundle is not signed" type="ERROR"/>"#,
        );
        golden(
            Body::Fire {
                bundle: Box::new(Bundle::new(CodeSection::builtin("cingal.tool.echo"))),
            },
            concat!(
                r#"<TSSCP cid="7" type="FIRE"><BUNDLE><CODE entry="cingal.tool.echo" type="builtin">"#,
                r#"<Class name="cingal.tool.echo"/></CODE><DATA/></BUNDLE></TSSCP>"#
            ),
        );
    }

    #[test]
    fn errors_come_back_typed() {
        let f = Frame::new(1, Body::error(&Error::UnknownEntity("abc".into())));
        let back = Frame::decode(&f.encode()).unwrap();
        assert!(matches!(back.into_result(), Err(Error::UnknownEntity(_))));
        let f = Frame::new(1, Body::error(&Error::UnknownResource("db".into())));
        assert_eq!(
            Frame::decode(&f.encode()).unwrap().into_result(),
            Err(Error::UnknownResource("db".into()))
        );
    }

    #[test]
    fn rejects_bad_frames() {
        assert!(Frame::decode(b"").is_err());
        assert!(Frame::decode(b"\x02<TSSCP cid=\"1\" type=\"ACK\"/>").is_err());
        assert!(Frame::decode(b"\x01<TSSCP cid=\"1\" type=\"NOPE\"/>").is_err());
        assert!(Frame::decode(b"\x01<TSSCP type=\"ACK\"/>").is_err());
        assert!(Frame::decode(b"\x01<TSSCP cid=\"1\" port=\"x\" type=\"LISTEN_REPLY\"/>").is_err());
    }
}
