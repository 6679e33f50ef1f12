//! Human-expert-in-the-loop: consult requests queued on a feedback
//! server, answered by people, returned as tool results.

pub mod http;
pub mod queue;
pub mod tools;

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ErrorCode, ToolError};

pub use http::{router, serve_expert, ExpertServer, HttpExpert};
pub use queue::{system_wall_clock, ExpertQueue, JournalEvent, QueueConfig, QueueError, QueueEvent, WallClock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestStatus {
    Pending,
    Claimed,
    Answered,
    Expired,
}

impl RequestStatus {
    /// Still waiting for an answer.
    pub fn is_open(self) -> bool {
        matches!(self, RequestStatus::Pending | RequestStatus::Claimed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RequestStatus::Pending => "pending",
            RequestStatus::Claimed => "claimed",
            RequestStatus::Answered => "answered",
            RequestStatus::Expired => "expired",
        }
    }
}

impl std::fmt::Display for RequestStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RequestStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(RequestStatus::Pending),
            "claimed" => Ok(RequestStatus::Claimed),
            "answered" => Ok(RequestStatus::Answered),
            "expired" => Ok(RequestStatus::Expired),
            other => Err(format!("unknown status '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Approve,
    Reject,
    FreeText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertResponse {
    pub request_id: u64,
    pub verdict: Verdict,
    pub text: String,
    pub expert_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRequest {
    pub id: u64,
    pub question: String,
    #[serde(default)]
    pub context: Value,
    pub status: RequestStatus,
    pub created_at: f64,
    #[serde(default)]
    pub answered_at: Option<f64>,
    pub timeout_seconds: f64,
    #[serde(default)]
    pub claimed_by: Option<String>,
    #[serde(default)]
    pub response: Option<ExpertResponse>,
}

/// Body of `POST /api/requests/{id}/response`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseInput {
    pub verdict: Verdict,
    #[serde(default)]
    pub text: String,
    pub expert_id: String,
}

impl ResponseInput {
    pub fn check(&self) -> Result<(), String> {
        if self.expert_id.trim().is_empty() {
            return Err("expert_id must not be empty".into());
        }
        if self.verdict == Verdict::FreeText && self.text.trim().is_empty() {
            return Err("a free-text verdict needs text".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub request_id: u64,
    pub status: RequestStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
}

pub fn unavailable(message: impl Into<String>) -> ToolError {
    ToolError::new(ErrorCode::ExpertUnavailable, message)
}

impl From<QueueError> for ToolError {
    fn from(e: QueueError) -> Self {
        let msg = e.to_string();
        match e {
            QueueError::NotFound(id) => ToolError::not_found(msg).with_detail(json!({ "request_id": id })),
            QueueError::Expired(id) => unavailable(msg).with_detail(json!({ "request_id": id, "status": "expired" })),
            QueueError::NotAnswered { id, status } => {
                unavailable(msg).with_detail(json!({ "request_id": id, "status": status }))
            }
            QueueError::Invalid(_) => ToolError::spec(msg),
            QueueError::Conflict(_) | QueueError::Journal(_) => ToolError::execution(msg),
        }
    }
}

fn consult_timeout(id: u64, timeout: Duration, status: Option<RequestStatus>) -> ToolError {
    unavailable(format!(
        "no expert answered request {id} within {:.3}s; a later answer can be fetched with get_expert_response",
        timeout.as_secs_f64()
    ))
    .with_detail(json!({ "request_id": id, "status": status.unwrap_or(RequestStatus::Pending) }))
}

/// Access to a feedback server, in-process or over HTTP.
#[async_trait]
pub trait ExpertService: Send + Sync {
    async fn submit(&self, question: &str, context: Value, timeout_seconds: f64) -> Result<ExpertRequest, ToolError>;

    /// Waits for the answer; `ExpertUnavailable` carrying the request id
    /// when none arrives in time.
    async fn wait(&self, id: u64, timeout: Duration) -> Result<ExpertResponse, ToolError>;

    async fn status(&self, id: u64) -> Result<StatusReport, ToolError>;

    async fn response(&self, id: u64) -> Result<ExpertResponse, ToolError>;

    async fn consult(&self, question: &str, context: Value, timeout_seconds: f64) -> Result<ExpertResponse, ToolError> {
        let request = self.submit(question, context, timeout_seconds).await?;
        self.wait(request.id, Duration::from_secs_f64(timeout_seconds)).await
    }
}

/// In-process service over a shared queue.
#[derive(Clone)]
pub struct LocalExpert {
    pub queue: Arc<ExpertQueue>,
}

impl LocalExpert {
    pub fn new(queue: Arc<ExpertQueue>) -> Self {
        Self { queue }
    }
}

#[async_trait]
impl ExpertService for LocalExpert {
    async fn submit(&self, question: &str, context: Value, timeout_seconds: f64) -> Result<ExpertRequest, ToolError> {
        Ok(self.queue.create(question, context, Some(timeout_seconds))?)
    }

    async fn wait(&self, id: u64, timeout: Duration) -> Result<ExpertResponse, ToolError> {
        match self.queue.wait(id, timeout).await {
            Ok(r) => Ok(r),
            Err(QueueError::NotAnswered { status, .. }) => Err(consult_timeout(id, timeout, Some(status))),
            Err(e) => Err(e.into()),
        }
    }

    async fn status(&self, id: u64) -> Result<StatusReport, ToolError> {
        let (status, position) = self.queue.status(id)?;
        Ok(StatusReport { request_id: id, status, position })
    }

    async fn response(&self, id: u64) -> Result<ExpertResponse, ToolError> {
        Ok(self.queue.response(id)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialized_forms() {
        assert_eq!(serde_json::to_value(Verdict::FreeText).unwrap(), json!("free-text"));
        assert_eq!(serde_json::to_value(RequestStatus::Claimed).unwrap(), json!("claimed"));
        let bad = ResponseInput { verdict: Verdict::FreeText, text: " ".into(), expert_id: "e".into() };
        assert!(bad.check().is_err());
    }

    #[tokio::test]
    async fn consult_times_out_with_request_id() {
        let svc = LocalExpert::new(Arc::new(ExpertQueue::new()));
        let err = svc.consult("anyone?", Value::Null, 0.05).await.unwrap_err();
        assert_eq!(err.code, ErrorCode::ExpertUnavailable);
        assert_eq!(err.detail.unwrap()["request_id"], 1);
    }
}
