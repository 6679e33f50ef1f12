//! Remote serving and consumption over JSON-RPC 2.0.

pub mod client;
pub mod framing;
pub mod proxy;
pub mod rpc;
pub mod server;

pub use client::{Endpoint, RemoteClient, CONNECT_TIMEOUT};
pub use framing::{decode_frame, encode_frame, Decoded, FrameDecoder, FrameError};
pub use proxy::{
    import_remote, proxy_handler, refresh_remote, register_remote, ProxyHandler, RemoteImport, SkippedTool,
};
pub use rpc::{rpc_code, Method, RpcError, RpcRequest, RpcResponse, RpcService};
pub use server::{http_router, serve, serve_connection, serve_http, serve_stdio, serve_tcp, ServerHandle, Transport};
