//! Remote tools as local registry entries.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::Serialize;
use serde_json::Value;

use super::client::RemoteClient;
use crate::caller::CallContext;
use crate::error::ToolError;
use crate::handler::{HandlerFactory, ToolHandler};
use crate::protocol::{Arguments, ToolCall, ToolSpec};
use crate::registry::{HandlerRef, ListFilter, Origin, Registry};

/// Forwards validated arguments to the remote and returns its result
/// unchanged. The local caller still enforces the return schema.
pub struct ProxyHandler {
    client: Arc<RemoteClient>,
    tool: String,
}

impl ProxyHandler {
    pub fn new(client: Arc<RemoteClient>, tool: impl Into<String>) -> Self {
        Self { client, tool: tool.into() }
    }
}

#[async_trait]
impl ToolHandler for ProxyHandler {
    async fn run(&self, args: Arguments, _ctx: &CallContext) -> Result<Value, ToolError> {
        let call = ToolCall { name: self.tool.clone(), arguments: args };
        self.client.call_tool(&call).await.outcome
    }

    /// Long-running remote tools declare their own wait in `timeout_seconds`.
    fn timeout_hint(&self, args: &Arguments) -> Option<Duration> {
        let secs = args.get("timeout_seconds")?.as_f64().filter(|s| s.is_finite() && *s > 0.0)?;
        Some(Duration::from_secs_f64(secs) + Duration::from_secs(10))
    }
}

struct ProxyFactory(Arc<ProxyHandler>);

#[async_trait]
impl HandlerFactory for ProxyFactory {
    async fn load(&self, _spec: &ToolSpec, _ctx: &CallContext) -> Result<Arc<dyn ToolHandler>, ToolError> {
        Ok(self.0.clone())
    }
}

pub fn proxy_handler(client: Arc<RemoteClient>, tool: &str) -> Arc<dyn HandlerFactory> {
    Arc::new(ProxyFactory(Arc::new(ProxyHandler::new(client, tool))))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedTool {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub error: ToolError,
}

/// Outcome of importing a remote's tool list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemoteImport {
    pub endpoint: String,
    pub registered: Vec<String>,
    pub skipped: Vec<SkippedTool>,
}

/// Snapshots the remote's tools into `registry`. Local names win:
/// collisions and malformed remote specs are skipped and reported.
pub async fn import_remote(registry: &Registry, client: Arc<RemoteClient>) -> Result<RemoteImport, ToolError> {
    let endpoint = client.endpoint().to_string();
    let specs = client.list_tool_specs(&ListFilter::default()).await?;
    let mut report = RemoteImport { endpoint: endpoint.clone(), registered: Vec::new(), skipped: Vec::new() };
    for spec in specs {
        let spec = match spec {
            Ok(s) => s,
            Err(error) => {
                report.skipped.push(SkippedTool { name: None, error });
                continue;
            }
        };
        let name = spec.name.clone();
        let handler = HandlerRef::Factory(proxy_handler(client.clone(), &name));
        match registry.register(spec, Origin::Remote(endpoint.clone()), handler) {
            Ok(n) => report.registered.push(n),
            Err(error) => report.skipped.push(SkippedTool { name: Some(name), error }),
        }
    }
    Ok(report)
}

pub async fn register_remote(registry: &Registry, endpoint: &str) -> Result<RemoteImport, ToolError> {
    let client = Arc::new(RemoteClient::connect(endpoint).await?);
    import_remote(registry, client).await
}

/// Replaces the entries imported from `endpoint` with a fresh snapshot.
/// Existing entries are kept if the remote cannot be reached.
pub async fn refresh_remote(registry: &Registry, endpoint: &str) -> Result<RemoteImport, ToolError> {
    let client = Arc::new(RemoteClient::connect(endpoint).await?);
    registry.remove_remote(client.endpoint());
    import_remote(registry, client).await
}
