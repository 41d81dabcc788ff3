//! The XML-RPC subset spoken between clients, brokers and workers.
//!
//! Calls travel as `POST /rpc` with an XML `methodCall` body. Responses are
//! XML `methodResponse` documents, except that methods able to return bulk
//! bytes may answer with a raw `application/octet-stream` body when the
//! request carried `X-Binary-Response: 1`.

mod value;
mod xml;

pub use value::{RpcValue, ValueError};
pub use xml::{decode_call, decode_response, encode_call, encode_fault, encode_success};

use crate::acl::Identity;

/// Request path for all RPC traffic.
pub const RPC_PATH: &str = "/rpc";
/// Request header asking for raw binary responses.
pub const BINARY_REQUEST_HEADER: &str = "X-Binary-Response";
/// Response header accompanying raw binary responses.
pub const RPC_STATUS_HEADER: &str = "X-RPC-Status";
/// Session token returned by `auth.login`.
pub const SESSION_HEADER: &str = "X-Session";
/// Base64 credential, verified on every call (used between nodes).
pub const CREDENTIAL_HEADER: &str = "X-Credential";
/// Marks a call relayed by another node; the value is a [`Hop`] name.
pub const FORWARDED_HEADER: &str = "X-Gridlet-Forwarded";

/// How a relayed call reached this node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hop {
    /// From a leader to the node owning a job; must be served locally.
    Route,
    /// From a standby to the node it believes leads; must not be relayed again.
    Proxy,
}

impl Hop {
    pub fn as_str(self) -> &'static str {
        match self {
            Hop::Route => "route",
            Hop::Proxy => "proxy",
        }
    }

    pub fn parse(s: &str) -> Option<Hop> {
        match s.trim() {
            "route" => Some(Hop::Route),
            "proxy" => Some(Hop::Proxy),
            _ => None,
        }
    }
}

pub const XML_CONTENT_TYPE: &str = "text/xml; charset=utf-8";
pub const BINARY_CONTENT_TYPE: &str = "application/octet-stream";

#[derive(Debug, thiserror::Error)]
pub enum RpcError {
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("unsupported value: {0}")]
    UnsupportedValue(String),
    #[error("invalid method name `{0}`")]
    InvalidMethod(String),
}

/// Returns true for names of the form `service.method`. Digits are allowed
/// after the first character of the method part (`file.md5`).
pub fn valid_method_name(name: &str) -> bool {
    let Some((service, method)) = name.split_once('.') else {
        return false;
    };
    !service.is_empty()
        && service.bytes().all(|b| b.is_ascii_lowercase())
        && method
            .bytes()
            .next()
            .is_some_and(|b| b.is_ascii_alphabetic() || b == b'_')
        && method
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpcCall {
    pub method: String,
    pub params: Vec<RpcValue>,
    /// Set by the transport once the caller has been authenticated.
    pub identity: Option<Identity>,
}

impl RpcCall {
    pub fn new(method: impl Into<String>, params: Vec<RpcValue>) -> Self {
        RpcCall {
            method: method.into(),
            params,
            identity: None,
        }
    }
}

/// An XML-RPC fault. Faults are ordinary response data, not transport errors.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("fault {code}: {message}")]
pub struct Fault {
    pub code: i32,
    pub message: String,
}

impl Fault {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Fault {
            code,
            message: message.into(),
        }
    }
}

/// Fault codes used across the suite.
pub mod fault_code {
    pub const MALFORMED_REQUEST: i32 = 1;
    pub const UNKNOWN_METHOD: i32 = 2;
    pub const ACCESS_DENIED: i32 = 3;
    pub const INVALID_CREDENTIAL: i32 = 4;
    pub const BAD_PARAMS: i32 = 5;
    pub const NOT_FOUND: i32 = 10;
    pub const UNKNOWN_JOB: i32 = 11;
    pub const UNKNOWN_PEER: i32 = 12;
    pub const NO_FRESH_PEERS: i32 = 13;
    pub const FORWARD_FAILED: i32 = 14;
    pub const OWNER_UNREACHABLE: i32 = 15;
    pub const DUPLICATE_JOB: i32 = 16;
    pub const INPUT_FETCH_FAILED: i32 = 17;
    pub const EXECUTOR_FAILED: i32 = 18;
    pub const SUBMIT_PARSE: i32 = 19;
    pub const RANGE_ERROR: i32 = 20;
    pub const OUTSIDE_ROOT: i32 = 21;
    pub const BAD_PATTERN: i32 = 22;
    pub const INVALID_SCOPE: i32 = 23;
    pub const INVALID_REQUEST: i32 = 24;
    pub const STALE_EPOCH: i32 = 25;
    pub const NOT_A_WORKER: i32 = 26;
    pub const INTERNAL: i32 = 99;
}

/// The result of dispatching a call.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Success(RpcValue),
    Fault(Fault),
    /// Raw bytes; the length is the vector's length.
    Binary(Vec<u8>),
}

impl From<Result<RpcValue, Fault>> for Outcome {
    fn from(r: Result<RpcValue, Fault>) -> Self {
        match r {
            Ok(v) => Outcome::Success(v),
            Err(f) => Outcome::Fault(f),
        }
    }
}

/// Framework-independent HTTP reply produced by [`respond`].
#[derive(Debug, Clone, PartialEq)]
pub struct WireReply {
    pub status: u16,
    pub content_type: &'static str,
    /// Extra response headers besides content type and length.
    pub headers: Vec<(&'static str, &'static str)>,
    pub body: Vec<u8>,
}

/// Frames an outcome for the wire.
///
/// Raw binary framing is used only when the client asked for it and the
/// method supports it; otherwise bytes are wrapped as base64 in XML.
pub fn respond(outcome: Outcome, binary_requested: bool, method_binary_capable: bool) -> WireReply {
    let xml = |body: Vec<u8>| WireReply {
        status: 200,
        content_type: XML_CONTENT_TYPE,
        headers: Vec::new(),
        body,
    };
    match outcome {
        Outcome::Binary(bytes) if binary_requested && method_binary_capable => WireReply {
            status: 200,
            content_type: BINARY_CONTENT_TYPE,
            headers: vec![(RPC_STATUS_HEADER, "ok")],
            body: bytes,
        },
        Outcome::Binary(bytes) => success_or_fault(&RpcValue::Base64(bytes), xml),
        Outcome::Success(v) => success_or_fault(&v, xml),
        Outcome::Fault(f) => xml(encode_fault(&f)),
    }
}

fn success_or_fault(v: &RpcValue, xml: impl Fn(Vec<u8>) -> WireReply) -> WireReply {
    match encode_success(v) {
        Ok(body) => xml(body),
        Err(e) => xml(encode_fault(&Fault::new(
            fault_code::INTERNAL,
            e.to_string(),
        ))),
    }
}

/// True when a request header value asks for binary framing.
pub fn wants_binary(header_value: Option<&str>) -> bool {
    header_value.map(str::trim) == Some("1")
}
