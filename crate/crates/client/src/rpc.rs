use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use gridlet_core::rpc::{
    decode_response, encode_call, Fault, Hop, RpcCall, RpcValue, BINARY_CONTENT_TYPE,
    BINARY_REQUEST_HEADER, CREDENTIAL_HEADER, FORWARDED_HEADER, RPC_PATH, RPC_STATUS_HEADER,
    SESSION_HEADER,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The node could not be reached or the connection broke.
    #[error("transport error: {0}")]
    Transport(String),
    /// The node answered with a fault.
    #[error("{0}")]
    Fault(#[from] Fault),
    /// The node answered with something that is not a valid response.
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl ClientError {
    pub fn fault_code(&self) -> Option<i32> {
        match self {
            ClientError::Fault(f) => Some(f.code),
            _ => None,
        }
    }
}

impl From<gridlet_core::rpc::ValueError> for ClientError {
    fn from(e: gridlet_core::rpc::ValueError) -> Self {
        ClientError::Protocol(format!("unexpected response shape: {e}"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum Auth {
    #[default]
    None,
    /// Raw credential bytes, sent base64-encoded with every call.
    Credential(Vec<u8>),
    Session(String),
}

/// XML-RPC over HTTP to one node, or to the first reachable of several
/// (a broker list for failover).
///
/// Connections are not pooled: a node that dies must stop answering at once,
/// rather than through a kept-alive socket.
#[derive(Clone)]
pub struct RpcClient {
    http: reqwest::Client,
    urls: Arc<Vec<String>>,
    current: Arc<AtomicUsize>,
    auth: Auth,
    hop: Option<Hop>,
}

impl RpcClient {
    /// `url` may be a comma-separated list; calls go to the first node that
    /// answers and stick to it.
    pub fn new(url: &str) -> Self {
        let urls: Vec<String> = url
            .split(',')
            .map(|u| u.trim().trim_end_matches('/').to_owned())
            .filter(|u| !u.is_empty())
            .collect();
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(3))
            .timeout(Duration::from_secs(120))
            .pool_max_idle_per_host(0)
            .build()
            .expect("http client builds");
        RpcClient {
            http,
            urls: Arc::new(urls),
            current: Arc::new(AtomicUsize::new(0)),
            auth: Auth::None,
            hop: None,
        }
    }

    pub fn with_auth(mut self, auth: Auth) -> Self {
        self.auth = auth;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.http = reqwest::Client::builder()
            .connect_timeout(timeout.min(Duration::from_secs(3)))
            .timeout(timeout)
            .pool_max_idle_per_host(0)
            .build()
            .expect("http client builds");
        self
    }

    /// Marks calls as relayed by this node.
    pub fn with_hop(mut self, hop: Hop) -> Self {
        self.hop = Some(hop);
        self
    }

    /// The URL calls currently go to.
    pub fn url(&self) -> &str {
        let i = self.current.load(Ordering::Relaxed) % self.urls.len().max(1);
        self.urls.get(i).map_or("", String::as_str)
    }

    pub async fn call(&self, method: &str, params: Vec<RpcValue>) -> Result<RpcValue, ClientError> {
        match self.send(method, params, false).await? {
            Reply::Value(v) => Ok(v),
            Reply::Bytes(_) => Err(ClientError::Protocol("unexpected binary response".into())),
        }
    }

    /// Calls a binary-capable method asking for raw framing. Falls back to
    /// a base64 XML answer if the node sends one.
    pub async fn call_binary(
        &self,
        method: &str,
        params: Vec<RpcValue>,
    ) -> Result<Vec<u8>, ClientError> {
        match self.send(method, params, true).await? {
            Reply::Bytes(b) => Ok(b),
            Reply::Value(RpcValue::Base64(b)) => Ok(b),
            Reply::Value(v) => Err(ClientError::Protocol(format!(
                "expected bytes, got {}",
                v.kind()
            ))),
        }
    }

    async fn send(
        &self,
        method: &str,
        params: Vec<RpcValue>,
        binary: bool,
    ) -> Result<Reply, ClientError> {
        if self.urls.is_empty() {
            return Err(ClientError::Transport("no node URL configured".into()));
        }
        let body = encode_call(&RpcCall::new(method, params))
            .map_err(|e| ClientError::Protocol(e.to_string()))?;
        let start = self.current.load(Ordering::Relaxed);
        let mut last = None;
        for k in 0..self.urls.len() {
            let i = (start + k) % self.urls.len();
            match self.send_to(&self.urls[i], body.clone(), binary).await {
                Err(ClientError::Transport(e)) => {
                    last = Some(ClientError::Transport(format!("{}: {e}", self.urls[i])))
                }
                other => {
                    self.current.store(i, Ordering::Relaxed);
                    return other;
                }
            }
        }
        Err(last.expect("at least one url"))
    }

    async fn send_to(&self, base: &str, body: Vec<u8>, binary: bool) -> Result<Reply, ClientError> {
        let mut req = self
            .http
            .post(format!("{base}{RPC_PATH}"))
            .header(reqwest::header::CONTENT_TYPE, "text/xml")
            .body(body);
        match &self.auth {
            Auth::None => {}
            Auth::Credential(c) => req = req.header(CREDENTIAL_HEADER, BASE64.encode(c)),
            Auth::Session(s) => req = req.header(SESSION_HEADER, s),
        }
        if binary {
            req = req.header(BINARY_REQUEST_HEADER, "1");
        }
        if let Some(hop) = self.hop {
            req = req.header(FORWARDED_HEADER, hop.as_str());
        }
        let resp = req
            .send()
            .await
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status();
        let is_binary = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.starts_with(BINARY_CONTENT_TYPE));
        let rpc_ok = resp
            .headers()
            .get(RPC_STATUS_HEADER)
            .and_then(|v| v.to_str().ok())
            == Some("ok");
        let expected_len = resp.content_length();
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ClientError::Protocol(format!("HTTP {status}")));
        }
        if is_binary {
            if !rpc_ok {
                return Err(ClientError::Protocol(
                    "binary response without ok status".into(),
                ));
            }
            if expected_len.is_some_and(|n| n != bytes.len() as u64) {
                return Err(ClientError::Transport("binary response truncated".into()));
            }
            return Ok(Reply::Bytes(bytes.to_vec()));
        }
        match decode_response(&bytes) {
            Ok(Ok(v)) => Ok(Reply::Value(v)),
            Ok(Err(f)) => Err(ClientError::Fault(f)),
            Err(e) => Err(ClientError::Protocol(e.to_string())),
        }
    }
}

enum Reply {
    Value(RpcValue),
    Bytes(Vec<u8>),
}
