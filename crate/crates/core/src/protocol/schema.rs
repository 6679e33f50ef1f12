//! Structural type descriptors used for return schemas, and the
//! conformance check applied to tool outputs.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use crate::error::ToolError;

/// One field of an object descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub ty: TypeDescriptor,
    pub required: bool,
}

/// Structural type of a JSON value. Objects may be open (any object) or
/// closed over a set of named fields.
#[derive(Debug, Clone, PartialEq)]
pub enum TypeDescriptor {
    Any,
    Null,
    String,
    Integer,
    Number,
    Boolean,
    Array(Box<TypeDescriptor>),
    Object(Option<BTreeMap<String, Field>>),
}

impl TypeDescriptor {
    /// Closed object whose fields are all required.
    pub fn object<I, K>(fields: I) -> Self
    where
        I: IntoIterator<Item = (K, TypeDescriptor)>,
        K: Into<String>,
    {
        TypeDescriptor::Object(Some(
            fields.into_iter().map(|(k, ty)| (k.into(), Field { ty, required: true })).collect(),
        ))
    }

    pub fn array(items: TypeDescriptor) -> Self {
        TypeDescriptor::Array(Box::new(items))
    }

    pub fn type_name(&self) -> String {
        match self {
            TypeDescriptor::Any => "any".into(),
            TypeDescriptor::Null => "null".into(),
            TypeDescriptor::String => "string".into(),
            TypeDescriptor::Integer => "integer".into(),
            TypeDescriptor::Number => "number".into(),
            TypeDescriptor::Boolean => "boolean".into(),
            TypeDescriptor::Array(items) => format!("array<{}>", items.type_name()),
            TypeDescriptor::Object(_) => "object".into(),
        }
    }

    /// Canonical serialized form (JSON-schema flavoured).
    pub fn to_value(&self) -> Value {
        match self {
            TypeDescriptor::Array(items) => json!({ "type": "array", "items": items.to_value() }),
            TypeDescriptor::Object(Some(fields)) => {
                let mut properties = Map::new();
                let mut required = Vec::new();
                for (name, field) in fields {
                    properties.insert(name.clone(), field.ty.to_value());
                    if field.required {
                        required.push(Value::String(name.clone()));
                    }
                }
                json!({ "type": "object", "properties": properties, "required": required })
            }
            other => json!({ "type": other.type_name() }),
        }
    }

    /// Parses either the canonical form or the shorthand form
    /// (`"string"`, `"array<integer>"`, `{"field": "string", "opt?": "number"}`).
    pub fn parse(value: &Value, path: &str) -> Result<Self, ToolError> {
        match value {
            Value::String(name) => parse_type_name(name, path),
            Value::Object(map) => match map.get("type") {
                Some(Value::String(kind)) => parse_schema_object(kind, map, path),
                _ if map.is_empty() => Ok(TypeDescriptor::Any),
                _ => parse_shorthand_object(map, path),
            },
            _ => Err(ToolError::spec_at(path, "type descriptor must be a type name or an object")),
        }
    }
}

fn parse_type_name(name: &str, path: &str) -> Result<TypeDescriptor, ToolError> {
    let name = name.trim();
    Ok(match name {
        "any" => TypeDescriptor::Any,
        "null" => TypeDescriptor::Null,
        "string" => TypeDescriptor::String,
        "integer" => TypeDescriptor::Integer,
        "number" => TypeDescriptor::Number,
        "boolean" => TypeDescriptor::Boolean,
        "object" => TypeDescriptor::Object(None),
        "array" => TypeDescriptor::array(TypeDescriptor::Any),
        _ => {
            if let Some(inner) = name.strip_prefix("array<").and_then(|rest| rest.strip_suffix('>')) {
                TypeDescriptor::array(parse_type_name(inner, path)?)
            } else {
                return Err(ToolError::spec_at(path, format!("unknown type '{name}'")));
            }
        }
    })
}

fn parse_schema_object(kind: &str, map: &Map<String, Value>, path: &str) -> Result<TypeDescriptor, ToolError> {
    match kind {
        "array" => match map.get("items") {
            Some(items) => Ok(TypeDescriptor::array(TypeDescriptor::parse(items, &format!("{path}.items"))?)),
            None => Ok(TypeDescriptor::array(TypeDescriptor::Any)),
        },
        "object" => {
            let Some(props) = map.get("properties") else {
                return Ok(TypeDescriptor::Object(None));
            };
            let Value::Object(props) = props else {
                return Err(ToolError::spec_at(format!("{path}.properties"), "properties must be an object"));
            };
            let required: Option<Vec<String>> = match map.get("required") {
                None => None,
                Some(Value::Array(items)) => Some(
                    items
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            v.as_str().map(str::to_string).ok_or_else(|| {
                                ToolError::spec_at(format!("{path}.required[{i}]"), "required entries must be strings")
                            })
                        })
                        .collect::<Result<_, _>>()?,
                ),
                Some(_) => {
                    return Err(ToolError::spec_at(
                        format!("{path}.required"),
                        "required must be a list of field names",
                    ))
                }
            };
            let mut fields = BTreeMap::new();
            for (name, sub) in props {
                let ty = TypeDescriptor::parse(sub, &format!("{path}.properties.{name}"))?;
                let is_required = required.as_ref().is_none_or(|list| list.iter().any(|r| r == name));
                fields.insert(name.clone(), Field { ty, required: is_required });
            }
            if let Some(list) = &required {
                if let Some(stray) = list.iter().find(|r| !fields.contains_key(*r)) {
                    return Err(ToolError::spec_at(
                        format!("{path}.required"),
                        format!("required field '{stray}' is not declared in properties"),
                    ));
                }
            }
            Ok(TypeDescriptor::Object(Some(fields)))
        }
        other => parse_type_name(other, &format!("{path}.type")),
    }
}

fn parse_shorthand_object(map: &Map<String, Value>, path: &str) -> Result<TypeDescriptor, ToolError> {
    let mut fields = BTreeMap::new();
    for (key, sub) in map {
        let (name, required) = match key.strip_suffix('?') {
            Some(stripped) => (stripped, false),
            None => (key.as_str(), true),
        };
        if name.is_empty() {
            return Err(ToolError::spec_at(path, "empty field name"));
        }
        let ty = TypeDescriptor::parse(sub, &format!("{path}.{name}"))?;
        fields.insert(name.to_string(), Field { ty, required });
    }
    Ok(TypeDescriptor::Object(Some(fields)))
}

/// JSON kind name of a value, in the vocabulary used by error messages.
pub fn json_kind(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_i64() || n.is_u64() => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Outcome of a return-schema check.
#[derive(Debug, Clone, PartialEq)]
pub struct Conformance {
    pub conforms: bool,
    /// Deepest failing field (`.a.b[1]`), `.` for the root.
    pub mismatch_path: Option<String>,
    pub reason: Option<String>,
}

/// Total structural check of `value` against `schema`.
pub fn conforms_to_return_schema(value: &Value, schema: &TypeDescriptor) -> Conformance {
    let mut path = String::new();
    match check(value, schema, &mut path) {
        Ok(()) => Conformance { conforms: true, mismatch_path: None, reason: None },
        Err((p, reason)) => Conformance {
            conforms: false,
            mismatch_path: Some(if p.is_empty() { ".".into() } else { p }),
            reason: Some(reason),
        },
    }
}

fn check(value: &Value, schema: &TypeDescriptor, path: &mut String) -> Result<(), (String, String)> {
    let mismatch =
        |path: &String| Err((path.clone(), format!("expected {}, got {}", schema.type_name(), json_kind(value))));
    match (schema, value) {
        (TypeDescriptor::Any, _) => Ok(()),
        (TypeDescriptor::Null, Value::Null) => Ok(()),
        (TypeDescriptor::String, Value::String(_)) => Ok(()),
        (TypeDescriptor::Boolean, Value::Bool(_)) => Ok(()),
        (TypeDescriptor::Number, Value::Number(_)) => Ok(()),
        (TypeDescriptor::Integer, Value::Number(n)) if n.is_i64() || n.is_u64() => Ok(()),
        (TypeDescriptor::Array(items), Value::Array(values)) => {
            for (i, item) in values.iter().enumerate() {
                let len = path.len();
                path.push_str(&format!("[{i}]"));
                check(item, items, path)?;
                path.truncate(len);
            }
            Ok(())
        }
        (TypeDescriptor::Object(None), Value::Object(_)) => Ok(()),
        (TypeDescriptor::Object(Some(fields)), Value::Object(map)) => {
            for (name, field) in fields {
                let len = path.len();
                path.push('.');
                path.push_str(name);
                match map.get(name) {
                    None | Some(Value::Null) if !field.required => {}
                    None => return Err((path.clone(), "missing required field".into())),
                    Some(sub) => check(sub, &field.ty, path)?,
                }
                path.truncate(len);
            }
            if let Some(extra) = map.keys().find(|k| !fields.contains_key(*k)) {
                return Err((format!("{path}.{extra}"), "undeclared field".into()));
            }
            Ok(())
        }
        _ => mismatch(path),
    }
}
