//! The runtime facade: registry, finder, backends and caller wired together.

use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;
use serde_json::{json, Value};

use crate::agentic::{AgentBackend, AgentConfig, Backends};
use crate::caller::{Caller, CallerConfig, Clock, SystemClock};
use crate::composer::{compose, CompositePlan};
use crate::error::{ErrorCode, ToolError};
use crate::expert::ExpertService;
use crate::finder::{Embedder, Finder, HashingEmbedder, KeywordConfig, Strategy, ToolMatch};
use crate::handler::HandlerFactory;
use crate::protocol::{ToolCall, ToolResult, ToolSpec};
use crate::registry::{HandlerRef, ListFilter, ManifestReport, Origin, Registry};

/// Shared services reachable from every handler through its call context.
pub struct Services {
    pub registry: Arc<Registry>,
    pub finder: Arc<Finder>,
    pub backends: Arc<Backends>,
    expert: RwLock<Option<Arc<dyn ExpertService>>>,
}

impl Services {
    pub fn expert(&self) -> Result<Arc<dyn ExpertService>, ToolError> {
        self.expert
            .read()
            .clone()
            .ok_or_else(|| ToolError::new(ErrorCode::ExpertUnavailable, "no expert feedback service is configured"))
    }

    pub fn set_expert(&self, service: Arc<dyn ExpertService>) {
        *self.expert.write() = Some(service);
    }
}

pub struct HubBuilder {
    registry: Option<Arc<Registry>>,
    backends: Option<Arc<Backends>>,
    embedder: Option<Arc<dyn Embedder<f64>>>,
    keyword: KeywordConfig<f64>,
    config: CallerConfig,
    clock: Arc<dyn Clock>,
    expert: Option<Arc<dyn ExpertService>>,
}

impl HubBuilder {
    pub fn registry(mut self, registry: Arc<Registry>) -> Self {
        self.registry = Some(registry);
        self
    }

    pub fn backends(mut self, backends: Arc<Backends>) -> Self {
        self.backends = Some(backends);
        self
    }

    /// Registers one more backend; the first one becomes the default.
    pub fn backend(self, backend: Arc<dyn AgentBackend>) -> Self {
        let backends = self.backends.clone().unwrap_or_default();
        backends.register(backend);
        self.backends(backends)
    }

    pub fn embedder(mut self, embedder: Arc<dyn Embedder<f64>>) -> Self {
        self.embedder = Some(embedder);
        self
    }

    pub fn keyword_config(mut self, config: KeywordConfig<f64>) -> Self {
        self.keyword = config;
        self
    }

    pub fn config(mut self, config: CallerConfig) -> Self {
        self.config = config;
        self
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn expert(mut self, expert: Arc<dyn ExpertService>) -> Self {
        self.expert = Some(expert);
        self
    }

    pub fn build(self) -> Hub {
        let registry = self.registry.unwrap_or_default();
        let backends = self.backends.unwrap_or_default();
        let embedder = self.embedder.unwrap_or_else(|| Arc::new(HashingEmbedder::default()));
        let finder =
            Finder::with_embedder(registry.clone(), backends.clone(), embedder).with_keyword_config(self.keyword);
        let services =
            Arc::new(Services { registry, finder: Arc::new(finder), backends, expert: RwLock::new(self.expert) });
        let caller = Caller::new(services.clone(), self.config, self.clock);
        Hub { services, caller }
    }
}

/// One runtime instance. Cloning shares everything.
#[derive(Clone)]
pub struct Hub {
    services: Arc<Services>,
    caller: Caller,
}

impl Default for Hub {
    fn default() -> Self {
        Self::new()
    }
}

impl Hub {
    pub fn new() -> Self {
        Self::builder().build()
    }

    pub fn builder() -> HubBuilder {
        HubBuilder {
            registry: None,
            backends: None,
            embedder: None,
            keyword: KeywordConfig::default(),
            config: CallerConfig::default(),
            clock: Arc::new(SystemClock::default()),
            expert: None,
        }
    }

    pub fn services(&self) -> &Arc<Services> {
        &self.services
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.services.registry
    }

    pub fn finder(&self) -> &Arc<Finder> {
        &self.services.finder
    }

    pub fn backends(&self) -> &Arc<Backends> {
        &self.services.backends
    }

    pub fn caller(&self) -> &Caller {
        &self.caller
    }

    pub fn set_expert(&self, service: Arc<dyn ExpertService>) {
        self.services.set_expert(service);
    }

    pub fn register_local(&self, spec: ToolSpec, handler: Arc<dyn HandlerFactory>) -> Result<String, ToolError> {
        self.registry().register_local(spec, handler)
    }

    /// Registers a prompt-driven tool. Its parameters default to the
    /// config's input parameters.
    pub fn register_agentic(&self, spec: ToolSpec, config: AgentConfig) -> Result<String, ToolError> {
        config.check_placeholders()?;
        let spec = config.apply_to(spec);
        self.registry().register(spec, Origin::Local, HandlerRef::Agent(config))
    }

    pub fn load_manifest(&self, path: impl AsRef<Path>) -> Result<ManifestReport, ToolError> {
        self.registry().load_manifest(path)
    }

    pub fn list_tools(&self, filter: &ListFilter) -> Vec<ToolSpec> {
        self.registry().list_tools(filter)
    }

    pub async fn find_tool(&self, query: &str, strategy: Strategy, limit: usize) -> Result<Vec<ToolMatch>, ToolError> {
        self.finder().find_tool(query, strategy, limit).await
    }

    pub async fn call(&self, call: ToolCall) -> ToolResult {
        self.caller.call_tool(call).await
    }

    /// Convenience for `call` with a name and a JSON argument object.
    pub async fn call_json(&self, name: &str, arguments: Value) -> ToolResult {
        self.call(ToolCall::new(name, arguments)).await
    }

    pub async fn run(&self, call_schema: &str) -> String {
        self.caller.run(call_schema).await
    }

    pub fn compose(&self, plan: CompositePlan) -> Result<String, ToolError> {
        compose(self.registry(), plan)
    }

    /// Imports every tool served at `endpoint` as a remote entry.
    pub async fn register_remote(&self, endpoint: &str) -> Result<crate::wire::RemoteImport, ToolError> {
        crate::wire::register_remote(self.registry(), endpoint).await
    }

    pub async fn refresh_remote(&self, endpoint: &str) -> Result<crate::wire::RemoteImport, ToolError> {
        crate::wire::refresh_remote(self.registry(), endpoint).await
    }

    /// Serialized `list_tools` result shared by the local and wire paths.
    pub fn list_tools_value(&self, filter: &ListFilter) -> Value {
        json!({ "tools": self.list_tools(filter).iter().map(ToolSpec::to_value).collect::<Vec<_>>() })
    }
}
