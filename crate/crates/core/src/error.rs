use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure a node, machine or deployment engine can report.
///
/// Variants that cross the wire carry a stable numeric code, see [`Error::code`].
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum Error {
    #[error("malformed document: {0}")]
    MalformedDocument(String),
    #[error("duplicate datum id {0:?}")]
    DuplicateDatumId(String),
    #[error("invalid signing key: {0}")]
    InvalidKey(String),
    #[error("bundle carries no AUTHENTICATION section")]
    MissingAuthSection,

    #[error("bundle is not signed")]
    Unsigned,
    #[error("unknown entity {0:?}")]
    UnknownEntity(String),
    #[error("signature does not verify")]
    BadSignature,
    #[error("permission denied: {entity} lacks {right}")]
    PermissionDenied { entity: String, right: String },

    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("unknown service {0:?}")]
    UnknownService(String),
    #[error("instances must be at least 1")]
    InvalidInstances,
    #[error("resource name {0:?} already in use")]
    NameInUse(String),
    #[error("unknown resource {0:?}")]
    UnknownResource(String),

    #[error("unknown entry point {0:?}")]
    UnknownEntryPoint(String),
    #[error("unsupported code type {0:?}")]
    UnsupportedCodeType(String),
    #[error("script error at line {line}: {message}")]
    Script { line: usize, message: String },

    #[error("channel closed")]
    ChannelClosed,
    #[error("named channel {0:?} already bound")]
    AlreadyBound(String),
    #[error("named channel {0:?} not bound")]
    NotBound(String),
    #[error("wiring failed: {0}")]
    WireFailed(String),
    #[error("invalid connector {0:?}")]
    InvalidConnector(String),

    #[error("host unreachable: {0}")]
    HostUnreachable(String),
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("port in use: {0}")]
    PortInUse(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("remote error {code}: {message}")]
    Remote { code: u16, message: String },

    #[error("state directory unusable: {0}")]
    CorruptState(String),
    #[error("unresolved reference {0:?}")]
    UnresolvedReference(String),
    #[error("bundle {0:?} missing from catalogue")]
    MissingBundle(String),
    #[error("{phase} phase failed: {detail}")]
    PhaseFailed { phase: String, detail: String },
    #[error("internal: {0}")]
    Internal(String),
}

impl Error {
    /// Wire error code, shared by TSSCP `ERROR` frames and task-report `Error` datums.
    pub fn code(&self) -> u16 {
        match self {
            Error::Unsigned | Error::BadSignature | Error::MissingAuthSection => 401,
            Error::UnknownEntity(_) => 402,
            Error::PermissionDenied { .. } => 403,
            Error::UnknownKey(_)
            | Error::UnknownResource(_)
            | Error::UnknownService(_)
            | Error::UnknownEntryPoint(_) => 404,
            Error::AlreadyBound(_) | Error::NameInUse(_) => 409,
            Error::MalformedDocument(_)
            | Error::DuplicateDatumId(_)
            | Error::UnsupportedCodeType(_)
            | Error::InvalidInstances
            | Error::InvalidConnector(_)
            | Error::NotBound(_)
            | Error::Script { .. } => 400,
            Error::Remote { code, .. } => *code,
            _ => 500,
        }
    }

    pub(crate) fn malformed(msg: impl Into<String>) -> Self {
        Error::MalformedDocument(msg.into())
    }

    /// Rebuilds a typed error from a wire code, keeping the remote message.
    pub fn from_remote(code: u16, message: String) -> Self {
        let quoted = |prefix: &str, suffix: &str| {
            message
                .strip_prefix(prefix)
                .and_then(|r| r.strip_suffix(suffix))
                .map(|r| r.trim_matches('"').to_string())
        };
        match code {
            401 if message == Error::BadSignature.to_string() => Error::BadSignature,
            401 => Error::Unsigned,
            402 => Error::UnknownEntity(quoted("unknown entity ", "").unwrap_or(message)),
            404 => match quoted("unknown resource ", "") {
                Some(r) => Error::UnknownResource(r),
                None => Error::Remote { code, message },
            },
            409 => match quoted("named channel ", " already bound") {
                Some(n) => Error::AlreadyBound(n),
                None => Error::Remote { code, message },
            },
            _ => Error::Remote { code, message },
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Transport(e.to_string())
    }
}
