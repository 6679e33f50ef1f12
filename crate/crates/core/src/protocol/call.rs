//! The interaction schema (`{"name": .., "arguments": {..}}`), argument
//! validation and structured results.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::schema::json_kind;
use super::spec::{ParamType, ToolSpec};
use crate::error::{ErrorCode, ToolError};

pub type Arguments = Map<String, Value>;

/// A protocol-conformant invocation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolCall {
    pub name: String,
    pub arguments: Arguments,
}

impl ToolCall {
    pub fn new(name: impl Into<String>, arguments: Value) -> Self {
        let arguments = match arguments {
            Value::Object(map) => map,
            Value::Null => Map::new(),
            other => {
                let mut map = Map::new();
                map.insert("value".into(), other);
                map
            }
        };
        Self { name: name.into(), arguments }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("call serialization is infallible")
    }
}

/// Parses a serialized call; exactly the keys `name` and `arguments`.
pub fn parse_tool_call(text: &str) -> Result<ToolCall, ToolError> {
    let value: Value = serde_json::from_str(text.trim())
        .map_err(|e| ToolError::spec_at("$", format!("tool call is not valid JSON: {e}")))?;
    call_from_value(&value)
}

pub fn call_from_value(value: &Value) -> Result<ToolCall, ToolError> {
    let Value::Object(map) = value else {
        return Err(ToolError::spec_at("$", "tool call must be a JSON object"));
    };
    if let Some(stray) = map.keys().find(|k| *k != "name" && *k != "arguments") {
        return Err(ToolError::spec_at(
            stray.as_str(),
            format!("unexpected key '{stray}'; a tool call has exactly 'name' and 'arguments'"),
        ));
    }
    let name = match map.get("name") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(_) => return Err(ToolError::spec_at("name", "name must be a non-empty string")),
        None => return Err(ToolError::spec_at("name", "missing 'name'")),
    };
    let arguments = match map.get("arguments") {
        Some(Value::Object(args)) => args.clone(),
        Some(_) => return Err(ToolError::spec_at("arguments", "arguments must be an object")),
        None => return Err(ToolError::spec_at("arguments", "missing 'arguments'")),
    };
    Ok(ToolCall { name, arguments })
}

fn conforms(value: &Value, ty: &ParamType) -> bool {
    match (ty, value) {
        (ParamType::String, Value::String(_)) => true,
        (ParamType::Boolean, Value::Bool(_)) => true,
        (ParamType::Number, Value::Number(_)) => true,
        (ParamType::Integer, Value::Number(n)) => n.is_i64() || n.is_u64(),
        (ParamType::Object, Value::Object(_)) => true,
        (ParamType::Array(items), Value::Array(values)) => values.iter().all(|v| conforms(v, items)),
        _ => false,
    }
}

fn describe(value: &Value, ty: &ParamType) -> String {
    // For arrays, report the first non-conforming element's kind.
    if let (ParamType::Array(items), Value::Array(values)) = (ty, value) {
        if let Some(bad) = values.iter().find(|v| !conforms(v, items)) {
            return format!("array containing {}", json_kind(bad));
        }
    }
    json_kind(value).to_string()
}

/// Checks a call's arguments against a spec. No coercion, no defaults.
///
/// Missing required parameters are reported first (all of them, in
/// declaration order), then the lexicographically first unknown key, then
/// the first type mismatch in declaration order. The outcome does not
/// depend on the argument map's iteration order.
pub fn validate_arguments(call: &ToolCall, spec: &ToolSpec) -> Result<Arguments, ToolError> {
    let missing: Vec<&str> = spec
        .parameters
        .iter()
        .filter(|p| p.required && !call.arguments.contains_key(&p.name))
        .map(|p| p.name.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(ToolError::new(
            ErrorCode::MissingRequired,
            format!("tool '{}' is missing required argument(s): {}", spec.name, missing.join(", ")),
        )
        .with_detail(json!(missing)));
    }

    let mut unknown: Vec<&String> = call.arguments.keys().filter(|k| spec.parameter(k).is_none()).collect();
    unknown.sort();
    if let Some(stray) = unknown.first() {
        let accepted: Vec<&str> = spec.parameters.iter().map(|p| p.name.as_str()).collect();
        return Err(ToolError::new(
            ErrorCode::UnknownArgument,
            format!(
                "tool '{}' has no parameter '{}' (accepted: {})",
                spec.name,
                stray,
                if accepted.is_empty() { "none".to_string() } else { accepted.join(", ") }
            ),
        )
        .with_detail(json!({ "argument": stray })));
    }

    let mut validated = Map::new();
    for p in &spec.parameters {
        let Some(value) = call.arguments.get(&p.name) else {
            continue;
        };
        if !conforms(value, &p.ty) {
            let got = describe(value, &p.ty);
            return Err(ToolError::new(
                ErrorCode::TypeMismatch,
                format!("argument '{}' of tool '{}' expects {}, got {}", p.name, spec.name, p.ty.type_name(), got),
            )
            .with_detail(json!({
                "param": p.name,
                "expected": p.ty.type_name(),
                "got": got,
            })));
        }
        validated.insert(p.name.clone(), value.clone());
    }
    Ok(validated)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

/// Outcome of executing a [`ToolCall`]: exactly one of payload/error.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolResult {
    pub outcome: Result<Value, ToolError>,
    pub duration_ms: f64,
}

impl ToolResult {
    pub fn ok(payload: Value, duration_ms: f64) -> Self {
        Self { outcome: Ok(payload), duration_ms }
    }

    pub fn err(error: ToolError, duration_ms: f64) -> Self {
        Self { outcome: Err(error), duration_ms }
    }

    pub fn status(&self) -> Status {
        if self.outcome.is_ok() {
            Status::Ok
        } else {
            Status::Error
        }
    }

    pub fn is_ok(&self) -> bool {
        self.outcome.is_ok()
    }

    pub fn payload(&self) -> Option<&Value> {
        self.outcome.as_ref().ok()
    }

    pub fn error(&self) -> Option<&ToolError> {
        self.outcome.as_ref().err()
    }

    pub fn to_value(&self) -> Value {
        let mut map = Map::new();
        match &self.outcome {
            Ok(payload) => {
                map.insert("status".into(), json!("ok"));
                map.insert("payload".into(), payload.clone());
            }
            Err(error) => {
                map.insert("status".into(), json!("error"));
                map.insert("error".into(), serde_json::to_value(error).expect("error serializes"));
            }
        }
        map.insert("duration_ms".into(), json!(self.duration_ms.max(0.0)));
        Value::Object(map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_value()).expect("result serialization is infallible")
    }

    pub fn from_value(value: &Value) -> Result<Self, ToolError> {
        let bad = |msg: &str| ToolError::execution(format!("malformed tool result: {msg}"));
        let Value::Object(map) = value else {
            return Err(bad("not an object"));
        };
        let duration_ms = map.get("duration_ms").and_then(Value::as_f64).unwrap_or(0.0);
        match map.get("status").and_then(Value::as_str) {
            Some("ok") => {
                if map.contains_key("error") {
                    return Err(bad("ok result carries an error"));
                }
                let payload = map.get("payload").cloned().ok_or_else(|| bad("missing payload"))?;
                Ok(Self::ok(payload, duration_ms))
            }
            Some("error") => {
                if map.contains_key("payload") {
                    return Err(bad("error result carries a payload"));
                }
                let error = map.get("error").ok_or_else(|| bad("missing error"))?;
                let error: ToolError = serde_json::from_value(error.clone()).map_err(|e| bad(&e.to_string()))?;
                Ok(Self::err(error, duration_ms))
            }
            _ => Err(bad("status must be 'ok' or 'error'")),
        }
    }
}

impl Serialize for ToolResult {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ToolResult {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        ToolResult::from_value(&value).map_err(serde::de::Error::custom)
    }
}
