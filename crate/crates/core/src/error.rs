//! Structured tool errors shared by every module and both transports.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Machine-readable error class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    ToolNotFound,
    SpecInvalid,
    MissingRequired,
    UnknownArgument,
    TypeMismatch,
    ExecutionFailed,
    Timeout,
    RemoteUnavailable,
    ExpertUnavailable,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::ToolNotFound => "ToolNotFound",
            ErrorCode::SpecInvalid => "SpecInvalid",
            ErrorCode::MissingRequired => "MissingRequired",
            ErrorCode::UnknownArgument => "UnknownArgument",
            ErrorCode::TypeMismatch => "TypeMismatch",
            ErrorCode::ExecutionFailed => "ExecutionFailed",
            ErrorCode::Timeout => "Timeout",
            ErrorCode::RemoteUnavailable => "RemoteUnavailable",
            ErrorCode::ExpertUnavailable => "ExpertUnavailable",
        }
    }

    /// True for the argument-validation family.
    pub fn is_validation(self) -> bool {
        matches!(
            self,
            ErrorCode::SpecInvalid | ErrorCode::MissingRequired | ErrorCode::UnknownArgument | ErrorCode::TypeMismatch
        )
    }
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A descriptive, structured failure returned to the calling client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ToolError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

impl ToolError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        let mut message = message.into();
        if message.trim().is_empty() {
            message = format!("{code} (no further detail)");
        }
        Self { code, message, detail: None }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = Some(detail);
        self
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::ToolNotFound, message)
    }

    pub fn execution(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::ExecutionFailed, message)
    }

    pub fn remote(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::RemoteUnavailable, message)
    }

    /// `SpecInvalid` pointing at the first offending field.
    pub fn spec_at(path: impl Into<String>, message: impl Into<String>) -> Self {
        let path = path.into();
        let message = message.into();
        Self::new(ErrorCode::SpecInvalid, format!("{path}: {message}")).with_detail(json!({ "path": path }))
    }

    pub fn spec(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::SpecInvalid, message)
    }

    /// The `path` entry of the detail payload, if any.
    pub fn path(&self) -> Option<&str> {
        self.detail.as_ref()?.get("path")?.as_str()
    }
}

pub type ToolResultOf<T> = std::result::Result<T, ToolError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_messages_are_replaced() {
        let err = ToolError::new(ErrorCode::Timeout, "  ");
        assert!(!err.message.trim().is_empty());
    }

    #[test]
    fn serializes_with_code_name() {
        let err = ToolError::spec_at("parameters[1].name", "duplicate parameter name");
        let text = serde_json::to_string(&err).unwrap();
        assert!(text.contains("\"code\":\"SpecInvalid\""));
        assert_eq!(err.path(), Some("parameters[1].name"));
        let back: ToolError = serde_json::from_str(&text).unwrap();
        assert_eq!(back, err);
    }
}
