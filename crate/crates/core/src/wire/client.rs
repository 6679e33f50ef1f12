//! Client side of the wire protocol.
//!
//! Endpoint addresses: `host:port` (framed tcp), `http://host:port`
//! (`POST /rpc`), `stdio:<command> [args..]` (spawned subprocess speaking
//! framed JSON-RPC on its stdin/stdout).

use std::collections::HashMap;
use std::process::Stdio;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde_json::{json, Value};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use super::framing::{encode_frame, FrameDecoder};
use super::rpc::{RpcError, RpcRequest, RpcResponse, RpcService, PROTOCOL_VERSION};
use super::server::serve_connection;
use crate::error::ToolError;
use crate::finder::{Strategy, ToolMatch};
use crate::protocol::{spec_from_value, ToolCall, ToolResult, ToolSpec};
use crate::registry::ListFilter;

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    Http(String),
    Stdio(Vec<String>),
}

impl std::str::FromStr for Endpoint {
    type Err = ToolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(cmd) = s.strip_prefix("stdio:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err(ToolError::spec_at("endpoint", "stdio endpoint needs a command"));
            }
            return Ok(Endpoint::Stdio(argv));
        }
        if s.starts_with("http://") || s.starts_with("https://") {
            let base = s.trim_end_matches('/');
            let url = if base.ends_with("/rpc") { base.to_string() } else { format!("{base}/rpc") };
            return Ok(Endpoint::Http(url));
        }
        match s.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => Ok(Endpoint::Tcp(s.to_string())),
            _ => Err(ToolError::spec_at(
                "endpoint",
                format!("'{s}' is not host:port, http://host:port or stdio:<command>"),
            )),
        }
    }
}

type Pending = Arc<Mutex<HashMap<u64, oneshot::Sender<RpcResponse>>>>;

/// One framed stream with response correlation by id.
struct FramedConn {
    tx: mpsc::UnboundedSender<Vec<u8>>,
    pending: Pending,
    closed: Arc<AtomicBool>,
    tasks: Vec<JoinHandle<()>>,
    _child: Option<tokio::process::Child>,
}

impl Drop for FramedConn {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

fn close(closed: &AtomicBool, pending: &Pending) {
    closed.store(true, Ordering::SeqCst);
    // Dropping the senders wakes every waiter with a closed-channel error.
    pending.lock().clear();
}

impl FramedConn {
    fn start<R, W>(mut reader: R, mut writer: W, child: Option<tokio::process::Child>) -> Arc<Self>
    where
        R: AsyncRead + Unpin + Send + 'static,
        W: AsyncWrite + Unpin + Send + 'static,
    {
        let pending: Pending = Arc::default();
        let closed = Arc::new(AtomicBool::new(false));
        let (tx, mut rx) = mpsc::unbounded_channel::<Vec<u8>>();

        let writer_task = {
            let (pending, closed) = (pending.clone(), closed.clone());
            tokio::spawn(async move {
                while let Some(frame) = rx.recv().await {
                    if writer.write_all(&frame).await.is_err() || writer.flush().await.is_err() {
                        break;
                    }
                }
                close(&closed, &pending);
            })
        };
        let reader_task = {
            let (pending, closed) = (pending.clone(), closed.clone());
            tokio::spawn(async move {
                let mut decoder = FrameDecoder::new();
                let mut chunk = vec![0u8; 16 * 1024];
                loop {
                    let n = match reader.read(&mut chunk).await {
                        Ok(0) | Err(_) => break,
                        Ok(n) => n,
                    };
                    decoder.push(&chunk[..n]);
                    while let Some(frame) = decoder.next_frame() {
                        let Ok(body) = frame else {
                            tracing::warn!("dropping malformed frame from server");
                            continue;
                        };
                        let response = serde_json::from_str::<Value>(&body)
                            .map_err(|e| e.to_string())
                            .and_then(|v| RpcResponse::from_value(&v));
                        match response {
                            Ok(resp) => match resp.id.as_u64().and_then(|id| pending.lock().remove(&id)) {
                                Some(waiter) => {
                                    let _ = waiter.send(resp);
                                }
                                None => tracing::warn!("uncorrelated response: {body}"),
                            },
                            Err(e) => tracing::warn!("malformed response ({e}): {body}"),
                        }
                    }
                }
                close(&closed, &pending);
            })
        };
        Arc::new(Self { tx, pending, closed, tasks: vec![writer_task, reader_task], _child: child })
    }

    fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    async fn request(&self, id: u64, body: String, label: &str) -> Result<RpcResponse, ToolError> {
        let gone = || ToolError::remote(format!("connection to {label} is closed"));
        let (tx, rx) = oneshot::channel();
        self.pending.lock().insert(id, tx);
        if self.is_closed() {
            self.pending.lock().remove(&id);
            return Err(gone());
        }
        if self.tx.send(encode_frame(&body)).is_err() {
            self.pending.lock().remove(&id);
            return Err(gone());
        }
        rx.await.map_err(|_| gone())
    }
}

enum Link {
    Framed { conn: tokio::sync::Mutex<Arc<FramedConn>>, reconnect: bool },
    Http { url: String, client: reqwest::Client },
}

/// A connection to a remote tool server.
pub struct RemoteClient {
    endpoint: String,
    kind: Option<Endpoint>,
    link: Link,
    next_id: AtomicU64,
}

async fn open_framed(endpoint: &Endpoint, label: &str) -> Result<Arc<FramedConn>, ToolError> {
    let unreachable = |e: &dyn std::fmt::Display| ToolError::remote(format!("cannot reach {label}: {e}"));
    match endpoint {
        Endpoint::Tcp(addr) => {
            let stream = tokio::time::timeout(CONNECT_TIMEOUT, tokio::net::TcpStream::connect(addr.as_str()))
                .await
                .map_err(|_| ToolError::remote(format!("connecting to {label} timed out after 5 s")))?
                .map_err(|e| unreachable(&e))?;
            let _ = stream.set_nodelay(true);
            let (r, w) = stream.into_split();
            Ok(FramedConn::start(r, w, None))
        }
        Endpoint::Stdio(argv) => {
            let mut child = tokio::process::Command::new(&argv[0])
                .args(&argv[1..])
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .kill_on_drop(true)
                .spawn()
                .map_err(|e| unreachable(&e))?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            Ok(FramedConn::start(stdout, stdin, Some(child)))
        }
        Endpoint::Http(_) => unreachable!("http endpoints are not framed"),
    }
}

impl RemoteClient {
    /// Connects and performs the version handshake, within [`CONNECT_TIMEOUT`].
    pub async fn connect(endpoint: &str) -> Result<Self, ToolError> {
        let kind: Endpoint = endpoint.parse()?;
        let link = match &kind {
            Endpoint::Http(url) => Link::Http {
                url: url.clone(),
                client: reqwest::Client::builder()
                    .connect_timeout(CONNECT_TIMEOUT)
                    .build()
                    .map_err(|e| ToolError::remote(format!("http client: {e}")))?,
            },
            other => {
                Link::Framed { conn: tokio::sync::Mutex::new(open_framed(other, endpoint).await?), reconnect: true }
            }
        };
        let client = Self { endpoint: endpoint.trim().to_string(), kind: Some(kind), link, next_id: AtomicU64::new(1) };
        tokio::time::timeout(CONNECT_TIMEOUT, client.initialize())
            .await
            .map_err(|_| ToolError::remote(format!("{endpoint} did not answer the handshake within 5 s")))??;
        Ok(client)
    }

    /// Wraps an already-open framed stream. No handshake, no reconnect.
    pub fn from_streams<R, W>(label: impl Into<String>, reader: R, writer: W) -> Self
    where
        R: AsyncRead + Unpin + Send + 'static,
        W: AsyncWrite + Unpin + Send + 'static,
    {
        Self {
            endpoint: label.into(),
            kind: None,
            link: Link::Framed {
                conn: tokio::sync::Mutex::new(FramedConn::start(reader, writer, None)),
                reconnect: false,
            },
            next_id: AtomicU64::new(1),
        }
    }

    /// A client wired to `service` through in-memory pipes carrying the
    /// same framed byte stream as the stdio transport.
    pub fn in_process(label: impl Into<String>, service: RpcService) -> Self {
        let (client_side, server_side) = tokio::io::duplex(1 << 16);
        let (sr, sw) = tokio::io::split(server_side);
        tokio::spawn(async move {
            let _ = serve_connection(service, sr, sw).await;
        });
        let (cr, cw) = tokio::io::split(client_side);
        Self::from_streams(label, cr, cw)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    async fn live_conn(
        &self,
        conn: &tokio::sync::Mutex<Arc<FramedConn>>,
        reconnect: bool,
    ) -> Result<Arc<FramedConn>, ToolError> {
        let mut guard = conn.lock().await;
        if guard.is_closed() && reconnect {
            if let Some(kind) = &self.kind {
                *guard = open_framed(kind, &self.endpoint).await?;
            }
        }
        Ok(guard.clone())
    }

    /// Sends one request. Outer error: transport failure. Inner error: the
    /// server's RPC error.
    pub async fn request(&self, method: &str, params: Value) -> Result<Result<Value, RpcError>, ToolError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let body = serde_json::to_string(&RpcRequest::new(id, method, params)).expect("request serializes");
        let response = match &self.link {
            Link::Framed { conn, reconnect } => {
                let conn = self.live_conn(conn, *reconnect).await?;
                conn.request(id, body, &self.endpoint).await?
            }
            Link::Http { url, client } => {
                let down = |e: reqwest::Error| ToolError::remote(format!("cannot reach {}: {e}", self.endpoint));
                let resp = client
                    .post(url)
                    .header("content-type", "application/json")
                    .body(body)
                    .send()
                    .await
                    .map_err(down)?;
                if !resp.status().is_success() {
                    return Err(ToolError::remote(format!("{} answered HTTP {}", self.endpoint, resp.status())));
                }
                let text = resp.text().await.map_err(down)?;
                let value: Value = serde_json::from_str(&text)
                    .map_err(|e| ToolError::remote(format!("malformed reply from {}: {e}", self.endpoint)))?;
                RpcResponse::from_value(&value).map_err(|e| ToolError::remote(format!("malformed reply: {e}")))?
            }
        };
        if response.id != json!(id) {
            return Err(ToolError::remote(format!("response id {} does not match request id {id}", response.id)));
        }
        Ok(response.outcome)
    }

    async fn request_tool(&self, method: &str, params: Value) -> Result<Value, ToolError> {
        self.request(method, params).await?.map_err(|e| e.to_tool_error())
    }

    /// Checks that both sides speak the same protocol version.
    pub async fn initialize(&self) -> Result<Value, ToolError> {
        let info = self
            .request_tool("initialize", json!({ "protocol_version": PROTOCOL_VERSION }))
            .await
            .map_err(|e| ToolError::remote(format!("handshake with {} failed: {}", self.endpoint, e.message)))?;
        match info.get("protocol_version").and_then(Value::as_str) {
            Some(PROTOCOL_VERSION) => Ok(info),
            other => Err(ToolError::remote(format!(
                "protocol version mismatch: client speaks \"{PROTOCOL_VERSION}\", {} speaks {}",
                self.endpoint,
                other.map_or("an unknown version".to_string(), |v| format!("\"{v}\""))
            ))),
        }
    }

    /// The server's `list_tools` result, unparsed.
    pub async fn list_tools_value(&self, filter: &ListFilter) -> Result<Value, ToolError> {
        let params = if *filter == ListFilter::default() {
            Value::Null
        } else {
            serde_json::to_value(filter).expect("filter serializes")
        };
        self.request_tool("list_tools", params).await
    }

    /// Each remote spec parsed independently; malformed ones come back as
    /// errors in place.
    pub async fn list_tool_specs(&self, filter: &ListFilter) -> Result<Vec<Result<ToolSpec, ToolError>>, ToolError> {
        let value = self.list_tools_value(filter).await?;
        let Some(tools) = value.get("tools").and_then(Value::as_array) else {
            return Err(ToolError::remote("list_tools reply lacks a 'tools' array"));
        };
        Ok(tools.iter().map(spec_from_value).collect())
    }

    pub async fn list_tools(&self, filter: &ListFilter) -> Result<Vec<ToolSpec>, ToolError> {
        self.list_tool_specs(filter).await?.into_iter().collect()
    }

    pub async fn find_tool(&self, query: &str, strategy: Strategy, limit: usize) -> Result<Vec<ToolMatch>, ToolError> {
        let value = self
            .request_tool("find_tool", json!({ "query": query, "strategy": strategy.as_str(), "limit": limit }))
            .await?;
        serde_json::from_value(value.get("matches").cloned().unwrap_or(Value::Null))
            .map_err(|e| ToolError::remote(format!("malformed find_tool reply: {e}")))
    }

    /// Forwards a call. Transport failures become `RemoteUnavailable`
    /// results; remote tool errors come back unchanged.
    pub async fn call_tool(&self, call: &ToolCall) -> ToolResult {
        let params = serde_json::to_value(call).expect("call serializes");
        match self.request("call_tool", params).await {
            Err(e) => ToolResult::err(e, 0.0),
            Ok(Ok(value)) => ToolResult::from_value(&value).unwrap_or_else(|e| ToolResult::err(e, 0.0)),
            Ok(Err(rpc)) => {
                let duration =
                    rpc.data.as_ref().and_then(|d| d.get("duration_ms")).and_then(Value::as_f64).unwrap_or(0.0);
                ToolResult::err(rpc.to_tool_error(), duration)
            }
        }
    }

    /// Registers a composite on the server; returns its name.
    pub async fn compose(&self, plan: &Value) -> Result<String, ToolError> {
        let value = self.request_tool("compose", plan.clone()).await?;
        value
            .get("name")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ToolError::remote("compose reply lacks 'name'"))
    }
}
