//! JSON-RPC 2.0 messages, the error-code table and the request dispatcher
//! shared by every transport.
//!
//! | error class                                   | code   |
//! |-----------------------------------------------|--------|
//! | ToolNotFound                                  | -32001 |
//! | SpecInvalid, MissingRequired, UnknownArgument, TypeMismatch | -32002 |
//! | ExecutionFailed                               | -32003 |
//! | Timeout                                       | -32004 |
//! | RemoteUnavailable                             | -32005 |
//! | ExpertUnavailable                             | -32006 |
//! | unparsable frame or body                      | -32700 |
//! | not a request object, wrong version           | -32600 |
//! | unknown method                                | -32601 |
//! | malformed params                              | -32602 |
//!
//! Tool-level errors carry the full structured error in `data`, so a
//! client rebuilds exactly the error the server produced.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::composer::CompositePlan;
use crate::error::{ErrorCode, ToolError};
use crate::finder::Strategy;
use crate::hub::Hub;
use crate::protocol::call_from_value;
use crate::registry::ListFilter;

pub const JSONRPC_VERSION: &str = "2.0";
/// Version of the method set exchanged by `initialize`.
pub const PROTOCOL_VERSION: &str = "1";

pub const PARSE_ERROR: i64 = -32700;
pub const INVALID_REQUEST: i64 = -32600;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;

pub const DEFAULT_FIND_LIMIT: usize = 10;

pub fn rpc_code(code: ErrorCode) -> i64 {
    match code {
        ErrorCode::ToolNotFound => -32001,
        ErrorCode::SpecInvalid | ErrorCode::MissingRequired | ErrorCode::UnknownArgument | ErrorCode::TypeMismatch => {
            -32002
        }
        ErrorCode::ExecutionFailed => -32003,
        ErrorCode::Timeout => -32004,
        ErrorCode::RemoteUnavailable => -32005,
        ErrorCode::ExpertUnavailable => -32006,
    }
}

/// Inverse of [`rpc_code`]; the validation family collapses to SpecInvalid.
pub fn error_code_for(rpc: i64) -> Option<ErrorCode> {
    Some(match rpc {
        -32001 => ErrorCode::ToolNotFound,
        -32002 => ErrorCode::SpecInvalid,
        -32003 => ErrorCode::ExecutionFailed,
        -32004 => ErrorCode::Timeout,
        -32005 => ErrorCode::RemoteUnavailable,
        -32006 => ErrorCode::ExpertUnavailable,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcRequest {
    pub jsonrpc: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<Value>,
    pub method: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub params: Value,
}

impl RpcRequest {
    pub fn new(id: impl Into<Value>, method: impl Into<String>, params: Value) -> Self {
        Self { jsonrpc: JSONRPC_VERSION.into(), id: Some(id.into()), method: method.into(), params }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcError {
    pub code: i64,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Value>,
}

impl RpcError {
    pub fn new(code: i64, message: impl Into<String>) -> Self {
        Self { code, message: message.into(), data: None }
    }

    pub fn parse(message: impl Into<String>) -> Self {
        Self::new(PARSE_ERROR, message)
    }

    pub fn invalid_request(message: impl Into<String>) -> Self {
        Self::new(INVALID_REQUEST, message)
    }

    pub fn from_tool_error(error: &ToolError) -> Self {
        Self {
            code: rpc_code(error.code),
            message: error.message.clone(),
            data: Some(serde_json::to_value(error).expect("error serializes")),
        }
    }

    /// Rebuilds the structured error: exact when `data` carries one,
    /// otherwise from the code table.
    pub fn to_tool_error(&self) -> ToolError {
        if let Some(data) = &self.data {
            let inner = data.get("error").unwrap_or(data);
            if let Ok(e) = serde_json::from_value::<ToolError>(inner.clone()) {
                return e;
            }
        }
        match error_code_for(self.code) {
            Some(code) => ToolError::new(code, self.message.clone()),
            None => ToolError::remote(format!("remote protocol error {}: {}", self.code, self.message))
                .with_detail(json!({ "rpc_code": self.code })),
        }
    }
}

/// A response: exactly one of `result` and `error`.
#[derive(Debug, Clone, PartialEq)]
pub struct RpcResponse {
    pub id: Value,
    pub outcome: Result<Value, RpcError>,
}

impl RpcResponse {
    pub fn ok(id: Value, result: Value) -> Self {
        Self { id, outcome: Ok(result) }
    }

    pub fn err(id: Value, error: RpcError) -> Self {
        Self { id, outcome: Err(error) }
    }

    pub fn to_value(&self) -> Value {
        let mut map = Map::new();
        map.insert("jsonrpc".into(), json!(JSONRPC_VERSION));
        map.insert("id".into(), self.id.clone());
        match &self.outcome {
            Ok(result) => map.insert("result".into(), result.clone()),
            Err(error) => map.insert("error".into(), serde_json::to_value(error).expect("error serializes")),
        };
        Value::Object(map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_value()).expect("response serializes")
    }

    pub fn from_value(value: &Value) -> Result<Self, String> {
        let map = value.as_object().ok_or("response is not an object")?;
        let id = map.get("id").cloned().unwrap_or(Value::Null);
        match (map.get("result"), map.get("error")) {
            (Some(result), None) => Ok(Self::ok(id, result.clone())),
            (None, Some(error)) => {
                let error: RpcError = serde_json::from_value(error.clone()).map_err(|e| e.to_string())?;
                Ok(Self::err(id, error))
            }
            _ => Err("response must carry exactly one of result and error".into()),
        }
    }
}

impl Serialize for RpcResponse {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for RpcResponse {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        RpcResponse::from_value(&value).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Initialize,
    ListTools,
    FindTool,
    CallTool,
    Compose,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Initialize, Method::ListTools, Method::FindTool, Method::CallTool, Method::Compose];

    /// Accepts the canonical names and the `tools/list` / `tools/call` aliases.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "initialize" => Method::Initialize,
            "list_tools" | "tools/list" => Method::ListTools,
            "find_tool" => Method::FindTool,
            "call_tool" | "tools/call" => Method::CallTool,
            "compose" => Method::Compose,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Initialize => "initialize",
            Method::ListTools => "list_tools",
            Method::FindTool => "find_tool",
            Method::CallTool => "call_tool",
            Method::Compose => "compose",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FindParams {
    query: String,
    #[serde(default)]
    strategy: Option<String>,
    #[serde(default)]
    limit: Option<usize>,
}

fn params_error(method: Method, e: impl std::fmt::Display) -> RpcError {
    RpcError::new(INVALID_PARAMS, format!("invalid params for {}: {e}", method.as_str()))
}

/// Answers requests against a hub. Transport-independent.
#[derive(Clone)]
pub struct RpcService {
    hub: Hub,
}

impl RpcService {
    pub fn new(hub: Hub) -> Self {
        Self { hub }
    }

    pub fn hub(&self) -> &Hub {
        &self.hub
    }

    /// Handles one request body. `None` for notifications (no `id`).
    pub async fn handle_text(&self, body: &str) -> Option<String> {
        let response = match serde_json::from_str::<Value>(body) {
            Ok(value) => self.handle_value(value).await?,
            Err(e) => RpcResponse::err(Value::Null, RpcError::parse(format!("body is not valid JSON: {e}"))),
        };
        Some(response.to_json())
    }

    pub async fn handle_value(&self, value: Value) -> Option<RpcResponse> {
        let Value::Object(map) = value else {
            return Some(RpcResponse::err(Value::Null, RpcError::invalid_request("request must be a JSON object")));
        };
        let id = match map.get("id") {
            None => None,
            Some(id @ (Value::Number(_) | Value::String(_) | Value::Null)) => Some(id.clone()),
            Some(_) => {
                return Some(RpcResponse::err(
                    Value::Null,
                    RpcError::invalid_request("id must be a number, string or null"),
                ))
            }
        };
        let reply_id = id.clone().unwrap_or(Value::Null);
        let outcome = self.dispatch_map(&map).await;
        id.map(|_| match outcome {
            Ok(result) => RpcResponse::ok(reply_id, result),
            Err(error) => RpcResponse::err(reply_id, error),
        })
    }

    async fn dispatch_map(&self, map: &Map<String, Value>) -> Result<Value, RpcError> {
        match map.get("jsonrpc") {
            Some(Value::String(v)) if v == JSONRPC_VERSION => {}
            Some(other) => {
                return Err(RpcError::invalid_request(format!(
                    "protocol version mismatch: request declares {other}, server speaks \"{JSONRPC_VERSION}\""
                )))
            }
            None => return Err(RpcError::invalid_request("missing \"jsonrpc\": \"2.0\"")),
        }
        let Some(name) = map.get("method").and_then(Value::as_str) else {
            return Err(RpcError::invalid_request("method must be a string"));
        };
        let Some(method) = Method::from_name(name) else {
            return Err(RpcError::new(METHOD_NOT_FOUND, format!("unknown method '{name}'")));
        };
        let params = map.get("params").cloned().unwrap_or(Value::Null);
        self.dispatch(method, params).await
    }

    pub async fn dispatch(&self, method: Method, params: Value) -> Result<Value, RpcError> {
        match method {
            Method::Initialize => {
                if let Some(v) = params.get("protocol_version") {
                    if v.as_str() != Some(PROTOCOL_VERSION) {
                        return Err(RpcError::invalid_request(format!(
                            "protocol version mismatch: client speaks {v}, server speaks \"{PROTOCOL_VERSION}\""
                        )));
                    }
                }
                Ok(json!({
                    "protocol_version": PROTOCOL_VERSION,
                    "server": "toolhub",
                    "methods": Method::ALL.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
                }))
            }
            Method::ListTools => {
                let filter: ListFilter = if params.is_null() {
                    ListFilter::default()
                } else {
                    serde_json::from_value(params).map_err(|e| params_error(method, e))?
                };
                Ok(self.hub.list_tools_value(&filter))
            }
            Method::FindTool => {
                let p: FindParams = serde_json::from_value(params).map_err(|e| params_error(method, e))?;
                let strategy = match p.strategy.as_deref() {
                    None => Strategy::Auto,
                    Some(s) => s.parse::<Strategy>().map_err(|e| RpcError::from_tool_error(&e))?,
                };
                let matches = self
                    .hub
                    .find_tool(&p.query, strategy, p.limit.unwrap_or(DEFAULT_FIND_LIMIT))
                    .await
                    .map_err(|e| RpcError::from_tool_error(&e))?;
                Ok(json!({ "matches": matches }))
            }
            Method::CallTool => {
                let call = call_from_value(&params).map_err(|e| RpcError::from_tool_error(&e))?;
                let result = self.hub.call(call).await;
                match &result.outcome {
                    Ok(_) => Ok(result.to_value()),
                    Err(error) => {
                        let mut e = RpcError::from_tool_error(error);
                        e.data = Some(json!({
                            "error": serde_json::to_value(error).expect("error serializes"),
                            "duration_ms": result.duration_ms.max(0.0),
                        }));
                        Err(e)
                    }
                }
            }
            Method::Compose => {
                let plan = CompositePlan::from_value(&params).map_err(|e| RpcError::from_tool_error(&e))?;
                let name = self.hub.compose(plan).map_err(|e| RpcError::from_tool_error(&e))?;
                Ok(json!({ "name": name }))
            }
        }
    }
}
