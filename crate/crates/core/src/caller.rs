//! The execution engine: resolve, validate, lazily load, cache, dispatch
//! and check results.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde_json::{json, Value};

use crate::agentic::AgentHandler;
use crate::composer::PlanHandler;
use crate::error::{ErrorCode, ToolError};
use crate::handler::ToolHandler;
use crate::hub::Services;
use crate::protocol::{
    conforms_to_return_schema, parse_tool_call, validate_arguments, Arguments, ToolCall, ToolResult, ToolSpec,
};
use crate::registry::{HandlerRef, ToolEntry};

/// Monotonic time source measured from an arbitrary origin.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Clock that only moves when told to; recorded durations are then exact.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: Mutex<Duration>,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&self, t: Duration) {
        *self.now.lock() = t;
    }

    pub fn advance(&self, by: Duration) {
        *self.now.lock() += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.now.lock()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheConfig {
    pub ttl_seconds: f64,
    pub max_loaded: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self { ttl_seconds: 600.0, max_loaded: 128 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallerConfig {
    pub cache: CacheConfig,
    /// Per-call deadline unless the handler supplies its own.
    pub timeout: Duration,
    /// Bound on nested calls made from inside handlers.
    pub max_depth: usize,
}

impl Default for CallerConfig {
    fn default() -> Self {
        Self { cache: CacheConfig::default(), timeout: Duration::from_secs(60), max_depth: 16 }
    }
}

/// A live handler instance in the cache.
pub struct LoadedTool {
    pub entry: Arc<ToolEntry>,
    pub instance: Arc<dyn ToolHandler>,
    pub loaded_at: Duration,
    /// Value of the global load counter when this instance was loaded.
    pub load_count_global: u64,
    gate: tokio::sync::Mutex<()>,
}

struct Cached {
    tool: Arc<LoadedTool>,
    last_used: Duration,
    in_flight: usize,
}

#[derive(Default)]
struct CacheState {
    loaded: HashMap<String, Cached>,
    loads_per_tool: HashMap<String, u64>,
}

struct CallerInner {
    services: Arc<Services>,
    config: CallerConfig,
    clock: Arc<dyn Clock>,
    state: Mutex<CacheState>,
    loading: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    loads: AtomicU64,
}

/// Cheap to clone; clones share the cache.
#[derive(Clone)]
pub struct Caller {
    inner: Arc<CallerInner>,
}

/// What a handler sees of the runtime while it runs.
#[derive(Clone)]
pub struct CallContext {
    caller: Caller,
    depth: usize,
}

impl CallContext {
    pub fn services(&self) -> &Arc<Services> {
        &self.caller.inner.services
    }

    pub fn caller(&self) -> &Caller {
        &self.caller
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn spec(&self, name: &str) -> Option<ToolSpec> {
        self.services().registry.spec(name)
    }

    /// Nested call through the same caller, one level deeper.
    pub async fn call(&self, call: ToolCall) -> ToolResult {
        self.caller.call_at_depth(call, self.depth + 1).await
    }
}

/// Decrements the in-flight count even when the call future is dropped.
struct InFlight<'a> {
    caller: &'a Caller,
    name: String,
    tool: Arc<LoadedTool>,
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        let now = self.caller.inner.clock.now();
        let mut state = self.caller.inner.state.lock();
        if let Some(c) = state.loaded.get_mut(&self.name) {
            if Arc::ptr_eq(&c.tool, &self.tool) {
                c.in_flight = c.in_flight.saturating_sub(1);
                c.last_used = now;
            }
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

impl Caller {
    pub fn new(services: Arc<Services>, config: CallerConfig, clock: Arc<dyn Clock>) -> Self {
        Self {
            inner: Arc::new(CallerInner {
                services,
                config,
                clock,
                state: Mutex::new(CacheState::default()),
                loading: Mutex::new(HashMap::new()),
                loads: AtomicU64::new(0),
            }),
        }
    }

    pub fn services(&self) -> &Arc<Services> {
        &self.inner.services
    }

    pub fn config(&self) -> &CallerConfig {
        &self.inner.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.inner.clock
    }

    pub fn context(&self) -> CallContext {
        CallContext { caller: self.clone(), depth: 0 }
    }

    /// Total handler loads since construction.
    pub fn load_count(&self) -> u64 {
        self.inner.loads.load(Ordering::SeqCst)
    }

    pub fn load_count_for(&self, name: &str) -> u64 {
        self.inner.state.lock().loads_per_tool.get(name).copied().unwrap_or(0)
    }

    /// Names of currently cached tools, sorted.
    pub fn loaded_tools(&self) -> Vec<String> {
        let mut names: Vec<String> = self.inner.state.lock().loaded.keys().cloned().collect();
        names.sort();
        names
    }

    /// Releases instances idle for longer than the TTL; busy instances are
    /// kept. Returns the evicted names, sorted.
    pub fn evict_expired(&self, now: Duration) -> Vec<String> {
        let ttl = Duration::from_secs_f64(self.inner.config.cache.ttl_seconds.max(0.0));
        let mut state = self.inner.state.lock();
        let mut evicted: Vec<String> = state
            .loaded
            .iter()
            .filter(|(_, c)| c.in_flight == 0 && now.saturating_sub(c.last_used) > ttl)
            .map(|(n, _)| n.clone())
            .collect();
        for n in &evicted {
            state.loaded.remove(n);
        }
        evicted.sort();
        evicted
    }

    /// Drops every idle cached instance.
    pub fn clear(&self) {
        self.inner.state.lock().loaded.retain(|_, c| c.in_flight > 0);
    }

    fn acquire_cached(&self, entry: &Arc<ToolEntry>, now: Duration) -> Option<Arc<LoadedTool>> {
        let mut state = self.inner.state.lock();
        let c = state.loaded.get_mut(&entry.spec.name)?;
        if !Arc::ptr_eq(&c.tool.entry, entry) {
            // The registry entry was replaced; reload on next use.
            if c.in_flight == 0 {
                state.loaded.remove(&entry.spec.name);
            }
            return None;
        }
        c.in_flight += 1;
        c.last_used = now;
        Some(c.tool.clone())
    }

    async fn instantiate(&self, entry: &Arc<ToolEntry>, ctx: &CallContext) -> Result<Arc<dyn ToolHandler>, ToolError> {
        match &entry.handler {
            HandlerRef::Factory(f) => f.load(&entry.spec, ctx).await,
            HandlerRef::Named(id) => {
                let factory = self.inner.services.registry.resolve_handler(id).ok_or_else(|| {
                    ToolError::execution(format!("no handler '{id}' is available for tool '{}'", entry.spec.name))
                        .with_detail(json!({ "handler": id }))
                })?;
                factory.load(&entry.spec, ctx).await
            }
            HandlerRef::Plan(plan) => Ok(Arc::new(PlanHandler::new(plan.clone()))),
            HandlerRef::Agent(cfg) => Ok(Arc::new(AgentHandler::new(cfg.clone()))),
        }
    }

    /// Returns the cached instance, loading it at most once even under
    /// concurrent first calls. The returned instance is marked in flight.
    async fn acquire(&self, entry: &Arc<ToolEntry>, ctx: &CallContext) -> Result<Arc<LoadedTool>, ToolError> {
        let name = entry.spec.name.clone();
        if let Some(t) = self.acquire_cached(entry, self.inner.clock.now()) {
            return Ok(t);
        }
        let lock = self.inner.loading.lock().entry(name.clone()).or_default().clone();
        let _guard = lock.lock().await;
        if let Some(t) = self.acquire_cached(entry, self.inner.clock.now()) {
            return Ok(t);
        }
        let instance = self.instantiate(entry, ctx).await?;
        let now = self.inner.clock.now();
        let seq = self.inner.loads.fetch_add(1, Ordering::SeqCst) + 1;
        let tool = Arc::new(LoadedTool {
            entry: entry.clone(),
            instance,
            loaded_at: now,
            load_count_global: seq,
            gate: tokio::sync::Mutex::new(()),
        });
        let mut state = self.inner.state.lock();
        *state.loads_per_tool.entry(name.clone()).or_default() += 1;
        let cap = self.inner.config.cache.max_loaded.max(1);
        while state.loaded.len() >= cap {
            // Least recently used idle instance; busy ones are never evicted.
            let victim = state
                .loaded
                .iter()
                .filter(|(n, c)| c.in_flight == 0 && **n != name)
                .min_by(|a, b| a.1.last_used.cmp(&b.1.last_used).then_with(|| a.0.cmp(b.0)))
                .map(|(n, _)| n.clone());
            match victim {
                Some(v) => {
                    state.loaded.remove(&v);
                }
                None => break,
            }
        }
        state.loaded.insert(name, Cached { tool: tool.clone(), last_used: now, in_flight: 1 });
        Ok(tool)
    }

    pub async fn call_tool(&self, call: ToolCall) -> ToolResult {
        self.call_at_depth(call, 0).await
    }

    async fn call_at_depth(&self, call: ToolCall, depth: usize) -> ToolResult {
        let start = self.inner.clock.now();
        let outcome = self.execute(call, depth).await;
        let elapsed = self.inner.clock.now().saturating_sub(start);
        match outcome {
            Ok(v) => ToolResult::ok(v, ms(elapsed)),
            Err(e) => ToolResult::err(e, ms(elapsed)),
        }
    }

    async fn execute(&self, call: ToolCall, depth: usize) -> Result<Value, ToolError> {
        if depth > self.inner.config.max_depth {
            return Err(ToolError::execution(format!(
                "nested call depth exceeds {} while calling '{}'",
                self.inner.config.max_depth, call.name
            )));
        }
        self.evict_expired(self.inner.clock.now());
        let entry = self.inner.services.registry.get(&call.name).ok_or_else(|| {
            ToolError::not_found(format!("no tool named '{}' is registered", call.name))
                .with_detail(json!({ "name": call.name }))
        })?;
        let args = validate_arguments(&call, &entry.spec)?;
        let ctx = CallContext { caller: self.clone(), depth };
        let tool = self.acquire(&entry, &ctx).await?;
        let _in_flight = InFlight { caller: self, name: entry.spec.name.clone(), tool: tool.clone() };
        let payload = self.dispatch(&tool, args, ctx).await?;
        let check = conforms_to_return_schema(&payload, &entry.spec.return_schema);
        if !check.conforms {
            let path = check.mismatch_path.unwrap_or_else(|| ".".into());
            let reason = check.reason.unwrap_or_default();
            return Err(ToolError::execution(format!(
                "payload of '{}' does not match its return schema at {path}: {reason}",
                entry.spec.name
            ))
            .with_detail(json!({ "path": path, "reason": reason })));
        }
        Ok(payload)
    }

    async fn dispatch(&self, tool: &Arc<LoadedTool>, args: Arguments, ctx: CallContext) -> Result<Value, ToolError> {
        let name = tool.entry.spec.name.clone();
        let timeout = tool.instance.timeout_hint(&args).unwrap_or(self.inner.config.timeout);
        let _gate = if tool.instance.reentrant() { None } else { Some(tool.gate.lock().await) };
        let handler = tool.instance.clone();
        let task = tokio::spawn(async move { handler.run(args, &ctx).await });
        let abort = task.abort_handle();
        match tokio::time::timeout(timeout, task).await {
            Ok(Ok(result)) => result,
            Ok(Err(join)) if join.is_panic() => {
                let panic = join.into_panic();
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "handler panicked".into());
                Err(ToolError::execution(format!("tool '{name}' failed: {msg}")))
            }
            Ok(Err(_)) => Err(ToolError::execution(format!("tool '{name}' was cancelled"))),
            Err(_) => {
                abort.abort();
                Err(ToolError::new(
                    ErrorCode::Timeout,
                    format!("tool '{name}' did not finish within {:.3}s", timeout.as_secs_f64()),
                )
                .with_detail(json!({ "timeout_ms": ms(timeout) })))
            }
        }
    }

    /// Serialized call in, serialized result out; never fails.
    pub async fn run(&self, call_schema: &str) -> String {
        match parse_tool_call(call_schema) {
            Ok(call) => self.call_tool(call).await.to_json(),
            Err(e) => ToolResult::err(e, 0.0).to_json(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::handler::{handler_fn, FnHandler, HandlerFactory};
    use crate::hub::Hub;
    use crate::protocol::{ParamType, ParameterSpec, TypeDescriptor};
    use async_trait::async_trait;
    use std::sync::atomic::AtomicUsize;

    fn echo_spec(name: &str) -> ToolSpec {
        ToolSpec::new(name, "Echoes input")
            .param(ParameterSpec::new("text", ParamType::String, "text").required())
            .returns(TypeDescriptor::object([("text", TypeDescriptor::String)]))
    }

    fn echo() -> Arc<dyn HandlerFactory> {
        handler_fn(|a| Ok(json!({ "text": a["text"] })))
    }

    fn hub_with(clock: Arc<ManualClock>, cache: CacheConfig) -> Hub {
        Hub::builder().clock(clock).config(CallerConfig { cache, ..Default::default() }).build()
    }

    #[tokio::test]
    async fn caches_after_first_load() {
        let hub = Hub::new();
        hub.register_local(echo_spec("echo"), echo()).unwrap();
        for _ in 0..2 {
            let r = hub.call(ToolCall::new("echo", json!({"text": "hi"}))).await;
            assert_eq!(r.payload(), Some(&json!({"text": "hi"})));
        }
        assert_eq!(hub.caller().load_count(), 1);
    }

    #[tokio::test]
    async fn ttl_eviction() {
        let clock = Arc::new(ManualClock::new());
        let hub = hub_with(clock.clone(), CacheConfig::default());
        hub.register_local(echo_spec("echo"), echo()).unwrap();
        let caller = hub.caller();
        caller.call_tool(ToolCall::new("echo", json!({"text": "a"}))).await;
        assert!(caller.evict_expired(Duration::from_secs(599)).is_empty());
        assert_eq!(caller.evict_expired(Duration::from_secs(601)), ["echo"]);
        clock.set(Duration::from_secs(602));
        caller.call_tool(ToolCall::new("echo", json!({"text": "a"}))).await;
        assert_eq!(caller.load_count(), 2);
    }

    #[tokio::test]
    async fn lru_capacity_one() {
        let clock = Arc::new(ManualClock::new());
        let hub = hub_with(clock.clone(), CacheConfig { ttl_seconds: 600.0, max_loaded: 1 });
        hub.register_local(echo_spec("a_tool"), echo()).unwrap();
        hub.register_local(echo_spec("b_tool"), echo()).unwrap();
        let caller = hub.caller();
        for (i, name) in ["a_tool", "b_tool", "a_tool", "b_tool"].iter().enumerate() {
            clock.advance(Duration::from_secs(1));
            caller.call_tool(ToolCall::new(*name, json!({"text": "x"}))).await;
            assert_eq!(caller.loaded_tools(), [*name]);
            assert_eq!(caller.load_count(), i as u64 + 1);
        }
    }

    #[tokio::test]
    async fn return_schema_is_enforced() {
        let hub = Hub::new();
        hub.register_local(echo_spec("bad"), handler_fn(|_| Ok(json!({"text": 3})))).unwrap();
        let r = hub.call(ToolCall::new("bad", json!({"text": "x"}))).await;
        let e = r.error().unwrap();
        assert_eq!(e.code, ErrorCode::ExecutionFailed);
        assert_eq!(e.detail.as_ref().unwrap()["path"], ".text");
    }

    #[tokio::test]
    async fn panics_and_timeouts_become_errors() {
        struct Sleepy;
        #[async_trait]
        impl ToolHandler for Sleepy {
            async fn run(&self, _a: Arguments, _c: &CallContext) -> Result<Value, ToolError> {
                tokio::time::sleep(Duration::from_secs(5)).await;
                Ok(json!({}))
            }
            fn timeout_hint(&self, _a: &Arguments) -> Option<Duration> {
                Some(Duration::from_millis(20))
            }
        }
        let hub = Hub::new();
        hub.register_local(ToolSpec::new("boom", "Panics"), handler_fn(|_| panic!("kaboom"))).unwrap();
        hub.register_local(ToolSpec::new("sleepy", "Sleeps"), crate::handler::shared(Sleepy)).unwrap();
        let r = hub.call(ToolCall::new("boom", json!({}))).await;
        assert!(r.error().unwrap().message.contains("kaboom"));
        let r = hub.call(ToolCall::new("sleepy", json!({}))).await;
        assert_eq!(r.error().unwrap().code, ErrorCode::Timeout);
    }

    #[tokio::test]
    async fn non_reentrant_handlers_are_serialized() {
        static NOW: AtomicUsize = AtomicUsize::new(0);
        static PEAK: AtomicUsize = AtomicUsize::new(0);
        struct Gate;
        #[async_trait]
        impl ToolHandler for Gate {
            async fn run(&self, _a: Arguments, _c: &CallContext) -> Result<Value, ToolError> {
                let n = NOW.fetch_add(1, Ordering::SeqCst) + 1;
                PEAK.fetch_max(n, Ordering::SeqCst);
                tokio::time::sleep(Duration::from_millis(5)).await;
                NOW.fetch_sub(1, Ordering::SeqCst);
                Ok(json!({}))
            }
            fn reentrant(&self) -> bool {
                false
            }
        }
        let hub = Hub::new();
        hub.register_local(ToolSpec::new("gate", "Serialized"), crate::handler::shared(Gate)).unwrap();
        let futs: Vec<_> = (0..8).map(|_| hub.call(ToolCall::new("gate", json!({})))).collect();
        for r in futures::future::join_all(futs).await {
            assert!(r.is_ok());
        }
        assert_eq!(PEAK.load(Ordering::SeqCst), 1);
        let _ = FnHandler::new(|_| Ok(json!(null))).non_reentrant();
    }

    #[tokio::test]
    async fn run_is_total_on_garbage() {
        let hub = Hub::new();
        for input in ["", "{", "[]", r#"{"tool":"x"}"#, r#"{"name":"ghost","arguments":{}}"#] {
            let out = hub.run(input).await;
            let v: Value = serde_json::from_str(&out).unwrap();
            assert_eq!(v["status"], "error");
        }
    }

    #[tokio::test]
    async fn reregistered_tool_is_reloaded() {
        let hub = Hub::new();
        hub.register_local(echo_spec("echo"), echo()).unwrap();
        hub.call(ToolCall::new("echo", json!({"text": "a"}))).await;
        hub.registry().remove("echo");
        hub.register_local(echo_spec("echo"), handler_fn(|_| Ok(json!({"text": "new"})))).unwrap();
        let r = hub.call(ToolCall::new("echo", json!({"text": "a"}))).await;
        assert_eq!(r.payload(), Some(&json!({"text": "new"})));
        assert_eq!(hub.caller().load_count(), 2);
    }
}
