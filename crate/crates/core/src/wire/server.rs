//! Transports: framed streams (stdio, tcp) and HTTP (`POST /rpc`).
//!
//! Requests on one stream are processed concurrently and answered as they
//! complete, so a slow call never holds up its neighbours.

use std::net::SocketAddr;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use serde_json::Value;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

use super::framing::{encode_frame, FrameDecoder};
use super::rpc::{RpcError, RpcResponse, RpcService};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Stdio,
    Tcp,
    Http,
}

impl std::str::FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stdio" => Ok(Transport::Stdio),
            "tcp" => Ok(Transport::Tcp),
            "http" => Ok(Transport::Http),
            other => Err(format!("unknown transport '{other}' (expected stdio, tcp or http)")),
        }
    }
}

/// Serves one framed byte stream until the peer closes it. Framing and
/// parse errors are answered with -32700 and the stream stays usable.
pub async fn serve_connection<R, W>(service: RpcService, mut reader: R, mut writer: W) -> std::io::Result<()>
where
    R: AsyncRead + Unpin + Send + 'static,
    W: AsyncWrite + Unpin + Send + 'static,
{
    let (tx, mut rx) = mpsc::unbounded_channel::<Vec<u8>>();
    let writer_task = tokio::spawn(async move {
        while let Some(frame) = rx.recv().await {
            writer.write_all(&frame).await?;
            writer.flush().await?;
        }
        writer.shutdown().await.ok();
        Ok::<(), std::io::Error>(())
    });

    let mut decoder = FrameDecoder::new();
    let mut chunk = vec![0u8; 16 * 1024];
    let read_result = loop {
        let n = match reader.read(&mut chunk).await {
            Ok(0) => break Ok(()),
            Ok(n) => n,
            Err(e) => break Err(e),
        };
        decoder.push(&chunk[..n]);
        while let Some(frame) = decoder.next_frame() {
            match frame {
                Ok(body) => {
                    let service = service.clone();
                    let tx = tx.clone();
                    tokio::spawn(async move {
                        if let Some(reply) = service.handle_text(&body).await {
                            let _ = tx.send(encode_frame(&reply));
                        }
                    });
                }
                Err(e) => {
                    let reply = RpcResponse::err(Value::Null, RpcError::parse(format!("framing error: {e}")));
                    let _ = tx.send(encode_frame(&reply.to_json()));
                }
            }
        }
    };
    // In-flight handlers keep their sender clones; the writer drains them.
    drop(tx);
    let written = writer_task.await.unwrap_or(Ok(()));
    read_result.and(written)
}

/// A running server. Dropping the handle leaves the server running.
pub struct ServerHandle {
    pub transport: Transport,
    pub addr: Option<SocketAddr>,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl ServerHandle {
    /// Endpoint address clients connect to.
    pub fn endpoint(&self) -> Option<String> {
        let addr = self.addr?;
        Some(match self.transport {
            Transport::Http => format!("http://{addr}"),
            _ => addr.to_string(),
        })
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }

    /// Waits for the server to stop on its own (stdin closed, for stdio).
    pub async fn join(self) -> std::io::Result<()> {
        self.task.await.unwrap_or(Ok(()))
    }
}

pub async fn serve_tcp(service: RpcService, bind: &str) -> std::io::Result<ServerHandle> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    let addr = listener.local_addr()?;
    let (tx, mut rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        loop {
            tokio::select! {
                _ = &mut rx => return Ok(()),
                accepted = listener.accept() => {
                    let (stream, peer) = match accepted {
                        Ok(s) => s,
                        Err(e) => {
                            tracing::warn!("accept failed: {e}");
                            continue;
                        }
                    };
                    let _ = stream.set_nodelay(true);
                    let service = service.clone();
                    tokio::spawn(async move {
                        let (r, w) = stream.into_split();
                        if let Err(e) = serve_connection(service, r, w).await {
                            tracing::debug!("connection {peer} ended: {e}");
                        }
                    });
                }
            }
        }
    });
    Ok(ServerHandle { transport: Transport::Tcp, addr: Some(addr), shutdown: Some(tx), task })
}

async fn rpc_endpoint(State(service): State<RpcService>, body: String) -> Response {
    match service.handle_text(&body).await {
        Some(reply) => (StatusCode::OK, [("content-type", "application/json")], reply).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

pub fn http_router(service: RpcService) -> Router {
    Router::new().route("/rpc", post(rpc_endpoint)).with_state(service)
}

pub async fn serve_http(service: RpcService, bind: &str) -> std::io::Result<ServerHandle> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = http_router(service);
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    Ok(ServerHandle { transport: Transport::Http, addr: Some(addr), shutdown: Some(tx), task })
}

/// Serves the process's stdin/stdout; ends when stdin closes.
pub fn serve_stdio(service: RpcService) -> ServerHandle {
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        tokio::select! {
            r = serve_connection(service, tokio::io::stdin(), tokio::io::stdout()) => r,
            _ = rx => Ok(()),
        }
    });
    ServerHandle { transport: Transport::Stdio, addr: None, shutdown: Some(tx), task }
}

pub async fn serve(service: RpcService, transport: Transport, bind: &str) -> std::io::Result<ServerHandle> {
    match transport {
        Transport::Stdio => Ok(serve_stdio(service)),
        Transport::Tcp => serve_tcp(service, bind).await,
        Transport::Http => serve_http(service, bind).await,
    }
}
