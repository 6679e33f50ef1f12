//! Tool specification documents.
//!
//! Two serialized layouts are accepted: a flat `parameters` list and the
//! nested `parameter` object (`{"type":"object","properties":{..},"required":[..]}`).
//! Both normalize to [`ToolSpec`]; serialization always emits the flat form.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};

use super::schema::TypeDescriptor;
use crate::error::ToolError;

pub const MAX_NAME_LEN: usize = 128;

/// Argument type, drawn from a closed enumeration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamType {
    String,
    Integer,
    Number,
    Boolean,
    Array(Box<ParamType>),
    Object,
}

impl ParamType {
    pub fn type_name(&self) -> String {
        match self {
            ParamType::String => "string".into(),
            ParamType::Integer => "integer".into(),
            ParamType::Number => "number".into(),
            ParamType::Boolean => "boolean".into(),
            ParamType::Array(items) => format!("array<{}>", items.type_name()),
            ParamType::Object => "object".into(),
        }
    }

    fn write_into(&self, map: &mut Map<String, Value>) {
        match self {
            ParamType::Array(items) => {
                map.insert("type".into(), json!("array"));
                let mut inner = Map::new();
                items.write_into(&mut inner);
                map.insert("items".into(), Value::Object(inner));
            }
            other => {
                map.insert("type".into(), Value::String(other.type_name()));
            }
        }
    }

    /// Reads `type` (and `items` for arrays) from a parameter object.
    fn read_from(map: &Map<String, Value>, path: &str) -> Result<Self, ToolError> {
        let Some(kind) = map.get("type") else {
            return Err(ToolError::spec_at(format!("{path}.type"), "missing parameter type"));
        };
        let Some(kind) = kind.as_str() else {
            return Err(ToolError::spec_at(format!("{path}.type"), "type must be a string"));
        };
        if kind == "array" {
            return match map.get("items") {
                Some(Value::Object(items)) => {
                    Ok(ParamType::Array(Box::new(Self::read_from(items, &format!("{path}.items"))?)))
                }
                Some(Value::String(name)) => {
                    Ok(ParamType::Array(Box::new(Self::from_name(name, &format!("{path}.items"))?)))
                }
                _ => Err(ToolError::spec_at(format!("{path}.items"), "array parameters must declare their item type")),
            };
        }
        Self::from_name(kind, &format!("{path}.type"))
    }

    fn from_name(name: &str, path: &str) -> Result<Self, ToolError> {
        Ok(match name {
            "string" => ParamType::String,
            "integer" => ParamType::Integer,
            "number" => ParamType::Number,
            "boolean" => ParamType::Boolean,
            "object" => ParamType::Object,
            _ => {
                if let Some(inner) = name.strip_prefix("array<").and_then(|r| r.strip_suffix('>')) {
                    ParamType::Array(Box::new(Self::from_name(inner, path)?))
                } else {
                    return Err(ToolError::spec_at(
                        path,
                        format!("type '{name}' is not one of string, integer, number, boolean, array<T>, object"),
                    ));
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSpec {
    pub name: String,
    pub ty: ParamType,
    pub description: String,
    pub required: bool,
}

impl ParameterSpec {
    pub fn new(name: impl Into<String>, ty: ParamType, description: impl Into<String>) -> Self {
        Self { name: name.into(), ty, description: description.into(), required: false }
    }

    pub fn required(mut self) -> Self {
        self.required = true;
        self
    }

    pub fn to_value(&self) -> Value {
        let mut map = Map::new();
        map.insert("name".into(), Value::String(self.name.clone()));
        self.ty.write_into(&mut map);
        map.insert("description".into(), Value::String(self.description.clone()));
        map.insert("required".into(), Value::Bool(self.required));
        Value::Object(map)
    }
}

/// The standardized description of one tool.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameters: Vec<ParameterSpec>,
    pub return_schema: TypeDescriptor,
    pub tags: Vec<String>,
    /// Opaque configuration injected into the implementation at load time.
    pub settings: Map<String, Value>,
}

impl ToolSpec {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            parameters: Vec::new(),
            return_schema: TypeDescriptor::Any,
            tags: Vec::new(),
            settings: Map::new(),
        }
    }

    pub fn param(mut self, param: ParameterSpec) -> Self {
        self.parameters.push(param);
        self
    }

    pub fn returns(mut self, schema: TypeDescriptor) -> Self {
        self.return_schema = schema;
        self
    }

    pub fn tag(mut self, tag: impl Into<String>) -> Self {
        self.tags.push(tag.into());
        self
    }

    pub fn setting(mut self, key: impl Into<String>, value: Value) -> Self {
        self.settings.insert(key.into(), value);
        self
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterSpec> {
        self.parameters.iter().find(|p| p.name == name)
    }

    /// Checks every invariant; returns the first violation.
    pub fn validate(&self) -> Result<(), ToolError> {
        validate_tool_name(&self.name, "name")?;
        let mut seen = HashSet::new();
        for (i, p) in self.parameters.iter().enumerate() {
            if !param_name_regex().is_match(&p.name) {
                return Err(ToolError::spec_at(
                    format!("parameters[{i}].name"),
                    format!("'{}' is not a valid parameter name", p.name),
                ));
            }
            if !seen.insert(p.name.as_str()) {
                return Err(ToolError::spec_at(
                    format!("parameters[{i}].name"),
                    format!("duplicate parameter name '{}'", p.name),
                ));
            }
        }
        Ok(())
    }

    /// Canonical (flat) serialized form.
    pub fn to_value(&self) -> Value {
        let mut map = Map::new();
        map.insert("name".into(), Value::String(self.name.clone()));
        map.insert("description".into(), Value::String(self.description.clone()));
        map.insert("parameters".into(), Value::Array(self.parameters.iter().map(ParameterSpec::to_value).collect()));
        map.insert("return_schema".into(), self.return_schema.to_value());
        if !self.tags.is_empty() {
            map.insert("tags".into(), Value::Array(self.tags.iter().cloned().map(Value::String).collect()));
        }
        if !self.settings.is_empty() {
            map.insert("settings".into(), Value::Object(self.settings.clone()));
        }
        Value::Object(map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_value()).expect("spec serialization is infallible")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("spec serialization is infallible")
    }
}

fn tool_name_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[a-z][a-z0-9_]*$").unwrap())
}

fn param_name_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[A-Za-z_][A-Za-z0-9_\-]*$").unwrap())
}

pub fn validate_tool_name(name: &str, path: &str) -> Result<(), ToolError> {
    if name.is_empty() {
        return Err(ToolError::spec_at(path, "tool name must not be empty"));
    }
    if name.len() > MAX_NAME_LEN {
        return Err(ToolError::spec_at(path, format!("tool name longer than {MAX_NAME_LEN} characters")));
    }
    if !tool_name_regex().is_match(name) {
        return Err(ToolError::spec_at(path, format!("tool name '{name}' must match [a-z][a-z0-9_]*")));
    }
    Ok(())
}

/// Parses a serialized specification document.
pub fn parse_tool_spec(text: &str) -> Result<ToolSpec, ToolError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| ToolError::spec_at("$", format!("not valid JSON: {e}")))?;
    spec_from_value(&value)
}

/// Same as [`parse_tool_spec`] for an already-decoded document.
pub fn spec_from_value(value: &Value) -> Result<ToolSpec, ToolError> {
    let Value::Object(doc) = value else {
        return Err(ToolError::spec_at("$", "specification must be a JSON object"));
    };

    let name = match doc.get("name") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ToolError::spec_at("name", "name must be a string")),
        None => return Err(ToolError::spec_at("name", "missing tool name")),
    };
    validate_tool_name(&name, "name")?;

    let description = match doc.get("description") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ToolError::spec_at("description", "description must be a string")),
        None => return Err(ToolError::spec_at("description", "missing description")),
    };

    let parameters = match (doc.get("parameters"), doc.get("parameter")) {
        (Some(_), Some(_)) => return Err(ToolError::spec_at("parameter", "both 'parameters' and 'parameter' present")),
        (Some(flat), None) => parse_flat_parameters(flat)?,
        (None, Some(nested)) => parse_nested_parameters(nested)?,
        (None, None) => Vec::new(),
    };

    let return_schema = match doc.get("return_schema") {
        Some(v) => TypeDescriptor::parse(v, "return_schema")?,
        None => TypeDescriptor::Any,
    };

    let tags = match doc.get("tags") {
        None => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, t)| {
                t.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| ToolError::spec_at(format!("tags[{i}]"), "tags must be strings"))
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(ToolError::spec_at("tags", "tags must be a list")),
    };

    let mut settings = match doc.get("settings") {
        None => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err(ToolError::spec_at("settings", "settings must be an object")),
    };
    for (key, v) in doc {
        if !matches!(
            key.as_str(),
            "name" | "description" | "parameters" | "parameter" | "return_schema" | "tags" | "settings"
        ) {
            settings.insert(key.clone(), v.clone());
        }
    }

    let spec = ToolSpec { name, description, parameters, return_schema, tags, settings };
    spec.validate()?;
    Ok(spec)
}

fn parse_flat_parameters(value: &Value) -> Result<Vec<ParameterSpec>, ToolError> {
    let Value::Array(items) = value else {
        return Err(ToolError::spec_at("parameters", "parameters must be a list"));
    };
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let path = format!("parameters[{i}]");
            let Value::Object(map) = item else {
                return Err(ToolError::spec_at(path, "parameter must be an object"));
            };
            let name = match map.get("name") {
                Some(Value::String(s)) => s.clone(),
                _ => return Err(ToolError::spec_at(format!("{path}.name"), "missing parameter name")),
            };
            read_parameter(name, map, &path, None)
        })
        .collect()
}

fn parse_nested_parameters(value: &Value) -> Result<Vec<ParameterSpec>, ToolError> {
    let Value::Object(map) = value else {
        return Err(ToolError::spec_at("parameter", "parameter must be an object"));
    };
    if let Some(kind) = map.get("type") {
        if kind != "object" {
            return Err(ToolError::spec_at("parameter.type", "parameter block must have type 'object'"));
        }
    }
    let required: Vec<String> = match map.get("required") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.as_str().map(str::to_string).ok_or_else(|| {
                    ToolError::spec_at(format!("parameter.required[{i}]"), "required entries must be strings")
                })
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(ToolError::spec_at("parameter.required", "required must be a list")),
    };
    let props = match map.get("properties") {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Object(p)) => p.clone(),
        Some(_) => return Err(ToolError::spec_at("parameter.properties", "properties must be an object")),
    };
    let mut out = Vec::with_capacity(props.len());
    for (name, prop) in &props {
        let path = format!("parameter.properties.{name}");
        let Value::Object(pmap) = prop else {
            return Err(ToolError::spec_at(path, "property must be an object"));
        };
        let listed = required.iter().any(|r| r == name);
        out.push(read_parameter(name.clone(), pmap, &path, Some(listed))?);
    }
    if let Some(stray) = required.iter().find(|r| !props.contains_key(*r)) {
        return Err(ToolError::spec_at("parameter.required", format!("required parameter '{stray}' is not declared")));
    }
    Ok(out)
}

fn read_parameter(
    name: String,
    map: &Map<String, Value>,
    path: &str,
    required_override: Option<bool>,
) -> Result<ParameterSpec, ToolError> {
    let ty = ParamType::read_from(map, path)?;
    let description = match map.get("description") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ToolError::spec_at(format!("{path}.description"), "description must be a string")),
    };
    let flag = match map.get("required") {
        None | Some(Value::Null) => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(ToolError::spec_at(format!("{path}.required"), "required must be a boolean")),
    };
    Ok(ParameterSpec { name, ty, description, required: required_override.map_or(flag, |listed| listed || flag) })
}

impl Serialize for ParameterSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ParameterSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        let Value::Object(map) = &value else {
            return Err(serde::de::Error::custom("parameter must be an object"));
        };
        let name = match map.get("name") {
            Some(Value::String(s)) => s.clone(),
            _ => return Err(serde::de::Error::custom("missing parameter name")),
        };
        read_parameter(name, map, "parameter", None).map_err(serde::de::Error::custom)
    }
}

impl Serialize for ToolSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_value().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ToolSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        spec_from_value(&value).map_err(serde::de::Error::custom)
    }
}
