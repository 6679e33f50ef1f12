//! The consult/status/response tools exposed to agents.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde_json::Value;

use crate::caller::CallContext;
use crate::error::ToolError;
use crate::handler::{shared, ToolHandler};
use crate::hub::Hub;
use crate::protocol::{Arguments, Field, ParamType, ParameterSpec, ToolSpec, TypeDescriptor};
use crate::registry::{HandlerRef, Origin, Registry};

pub const CONSULT_TOOL: &str = "consult_human_expert";
pub const STATUS_TOOL: &str = "get_expert_status";
pub const RESPONSE_TOOL: &str = "get_expert_response";
pub const DEFAULT_CONSULT_TIMEOUT: f64 = 3600.0;

/// Slack added to the consult deadline so the expert service times out
/// (with a request id) before the caller's own deadline fires.
pub const DEADLINE_MARGIN: Duration = Duration::from_secs(5);

fn response_schema() -> TypeDescriptor {
    TypeDescriptor::object([
        ("request_id", TypeDescriptor::Integer),
        ("verdict", TypeDescriptor::String),
        ("text", TypeDescriptor::String),
        ("expert_id", TypeDescriptor::String),
    ])
}

pub fn consult_spec() -> ToolSpec {
    ToolSpec::new(
        CONSULT_TOOL,
        "Ask a human domain expert a question and wait for their verdict (approve, reject or free text).",
    )
    .param(ParameterSpec::new("question", ParamType::String, "Question shown to the expert").required())
    .param(ParameterSpec::new("context", ParamType::Object, "Supporting material shown next to the question"))
    .param(ParameterSpec::new(
        "timeout_seconds",
        ParamType::Number,
        "How long to wait for an answer; defaults to one hour",
    ))
    .returns(response_schema())
    .tag("human_expert_feedback")
}

pub fn status_spec() -> ToolSpec {
    let mut fields = BTreeMap::new();
    fields.insert("request_id".to_string(), Field { ty: TypeDescriptor::Integer, required: true });
    fields.insert("status".to_string(), Field { ty: TypeDescriptor::String, required: true });
    fields.insert("position".to_string(), Field { ty: TypeDescriptor::Integer, required: false });
    ToolSpec::new(STATUS_TOOL, "Report the status of an expert consultation request and its place in the queue.")
        .param(ParameterSpec::new("request_id", ParamType::Integer, "Id returned by the consult tool").required())
        .returns(TypeDescriptor::Object(Some(fields)))
        .tag("human_expert_feedback")
}

pub fn response_spec() -> ToolSpec {
    ToolSpec::new(RESPONSE_TOOL, "Fetch the expert's answer to an earlier consultation request.")
        .param(ParameterSpec::new("request_id", ParamType::Integer, "Id returned by the consult tool").required())
        .returns(response_schema())
        .tag("human_expert_feedback")
}

fn timeout_of(args: &Arguments) -> f64 {
    args.get("timeout_seconds")
        .and_then(Value::as_f64)
        .filter(|t| t.is_finite() && *t > 0.0)
        .unwrap_or(DEFAULT_CONSULT_TIMEOUT)
}

fn request_id(args: &Arguments) -> Result<u64, ToolError> {
    args.get("request_id")
        .and_then(Value::as_u64)
        .ok_or_else(|| ToolError::spec_at("arguments.request_id", "request_id must be a non-negative integer"))
}

struct Consult;

#[async_trait]
impl ToolHandler for Consult {
    async fn run(&self, args: Arguments, ctx: &CallContext) -> Result<Value, ToolError> {
        let expert = ctx.services().expert()?;
        let question = args.get("question").and_then(Value::as_str).unwrap_or_default();
        let context = args.get("context").cloned().unwrap_or(Value::Null);
        let response = expert.consult(question, context, timeout_of(&args)).await?;
        Ok(serde_json::to_value(response).expect("response serializes"))
    }

    fn timeout_hint(&self, args: &Arguments) -> Option<Duration> {
        Some(Duration::from_secs_f64(timeout_of(args)) + DEADLINE_MARGIN)
    }
}

struct Status;

#[async_trait]
impl ToolHandler for Status {
    async fn run(&self, args: Arguments, ctx: &CallContext) -> Result<Value, ToolError> {
        let report = ctx.services().expert()?.status(request_id(&args)?).await?;
        Ok(serde_json::to_value(report).expect("report serializes"))
    }
}

struct Response;

#[async_trait]
impl ToolHandler for Response {
    async fn run(&self, args: Arguments, ctx: &CallContext) -> Result<Value, ToolError> {
        let response = ctx.services().expert()?.response(request_id(&args)?).await?;
        Ok(serde_json::to_value(response).expect("response serializes"))
    }
}

/// Adds the expert handlers to the registry's catalog under their tool
/// names, so manifests can reference them.
pub fn register_expert_handlers(registry: &Registry) {
    registry.register_handler(CONSULT_TOOL, shared(Consult));
    registry.register_handler(STATUS_TOOL, shared(Status));
    registry.register_handler(RESPONSE_TOOL, shared(Response));
}

pub fn expert_specs() -> Vec<ToolSpec> {
    vec![consult_spec(), status_spec(), response_spec()]
}

/// Registers the three expert tools. They answer `ExpertUnavailable`
/// until an expert service is attached to the hub.
pub fn install_expert_tools(hub: &Hub) -> Result<(), ToolError> {
    let registry = hub.registry();
    register_expert_handlers(registry);
    for spec in expert_specs() {
        let name = spec.name.clone();
        registry.register(spec, Origin::Local, HandlerRef::Named(name))?;
    }
    Ok(())
}

/// Convenience for tests and the CLI: the expert tools backed by `service`.
pub fn attach_expert(hub: &Hub, service: Arc<dyn super::ExpertService>) -> Result<(), ToolError> {
    hub.set_expert(service);
    if !hub.registry().contains(CONSULT_TOOL) {
        install_expert_tools(hub)?;
    }
    Ok(())
}
