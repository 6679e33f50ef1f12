//! HTTP API of the feedback server and the matching client.
//!
//! | method | path                          | success | errors        |
//! |--------|-------------------------------|---------|---------------|
//! | GET    | /api/requests?status=S        | 200     | 400           |
//! | POST   | /api/requests                 | 201     | 400           |
//! | GET    | /api/requests/{id}            | 200     | 404           |
//! | GET    | /api/requests/{id}/status     | 200     | 404           |
//! | POST   | /api/requests/{id}/claim      | 200     | 404, 409, 410 |
//! | POST   | /api/requests/{id}/response   | 200     | 404, 409, 410 |
//! | GET    | /api/requests/{id}/wait?timeout=SECS | 200 | 404, 408, 410 |
//! | GET    | /api/events                   | 200 (event stream, heartbeat every 15 s) | |

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use super::{
    consult_timeout, unavailable, ExpertQueue, ExpertRequest, ExpertResponse, ExpertService, QueueError, RequestStatus,
    ResponseInput, StatusReport,
};
use crate::error::ToolError;

pub const HEARTBEAT: Duration = Duration::from_secs(15);

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn queue_error(e: QueueError) -> Response {
    let status = match &e {
        QueueError::NotFound(_) => StatusCode::NOT_FOUND,
        QueueError::Conflict(_) => StatusCode::CONFLICT,
        QueueError::Expired(_) => StatusCode::GONE,
        QueueError::Invalid(_) => StatusCode::BAD_REQUEST,
        QueueError::NotAnswered { .. } => StatusCode::REQUEST_TIMEOUT,
        QueueError::Journal(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error_response(status, e.to_string())
}

fn ok<T: serde::Serialize>(status: StatusCode, value: &T) -> Response {
    (status, Json(serde_json::to_value(value).expect("response serializes"))).into_response()
}

#[derive(Deserialize)]
struct ListQuery {
    status: Option<String>,
}

#[derive(Deserialize)]
struct CreateBody {
    question: String,
    #[serde(default)]
    context: Value,
    timeout_seconds: Option<f64>,
}

#[derive(Deserialize)]
struct ClaimBody {
    expert_id: String,
}

#[derive(Deserialize)]
struct WaitQuery {
    timeout: Option<f64>,
}

type Q = State<Arc<ExpertQueue>>;

async fn list_requests(State(q): Q, Query(query): Query<ListQuery>) -> Response {
    let status = match query.status.as_deref().map(str::parse::<RequestStatus>) {
        None => None,
        Some(Ok(s)) => Some(s),
        Some(Err(e)) => return error_response(StatusCode::BAD_REQUEST, e),
    };
    ok(StatusCode::OK, &q.list(status))
}

async fn create_request(
    State(q): Q,
    body: Result<Json<CreateBody>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let Ok(Json(body)) = body else {
        return error_response(StatusCode::BAD_REQUEST, "body must be {question, context?, timeout_seconds?}");
    };
    match q.create(&body.question, body.context, body.timeout_seconds) {
        Ok(r) => ok(StatusCode::CREATED, &r),
        Err(e) => queue_error(e),
    }
}

async fn get_request(State(q): Q, Path(id): Path<u64>) -> Response {
    match q.get(id) {
        Ok(r) => ok(StatusCode::OK, &r),
        Err(e) => queue_error(e),
    }
}

async fn get_status(State(q): Q, Path(id): Path<u64>) -> Response {
    match q.status(id) {
        Ok((status, position)) => ok(StatusCode::OK, &StatusReport { request_id: id, status, position }),
        Err(e) => queue_error(e),
    }
}

async fn claim_request(
    State(q): Q,
    Path(id): Path<u64>,
    body: Result<Json<ClaimBody>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let Ok(Json(body)) = body else {
        return error_response(StatusCode::BAD_REQUEST, "body must be {expert_id}");
    };
    match q.claim(id, &body.expert_id) {
        Ok(r) => ok(StatusCode::OK, &r),
        Err(e) => queue_error(e),
    }
}

async fn respond_request(
    State(q): Q,
    Path(id): Path<u64>,
    body: Result<Json<ResponseInput>, axum::extract::rejection::JsonRejection>,
) -> Response {
    let Ok(Json(body)) = body else {
        return error_response(StatusCode::BAD_REQUEST, "body must be {verdict, text, expert_id}");
    };
    match q.respond(id, body) {
        Ok(r) => ok(StatusCode::OK, &r),
        Err(e) => queue_error(e),
    }
}

async fn wait_request(State(q): Q, Path(id): Path<u64>, Query(query): Query<WaitQuery>) -> Response {
    let secs = query.timeout.unwrap_or(30.0).clamp(0.0, 24.0 * 3600.0);
    match q.wait(id, Duration::from_secs_f64(secs)).await {
        Ok(r) => ok(StatusCode::OK, &r),
        Err(e) => queue_error(e),
    }
}

async fn events(State(q): Q) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = q.subscribe();
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => {
                    let event = Event::default().event(ev.kind).json_data(&ev.request).expect("request serializes");
                    return Some((Ok(event), rx));
                }
                Err(RecvError::Lagged(_)) => continue,
                Err(RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::new().interval(HEARTBEAT).text("heartbeat"))
}

pub fn router(queue: Arc<ExpertQueue>) -> Router {
    Router::new()
        .route("/api/requests", get(list_requests).post(create_request))
        .route("/api/requests/{id}", get(get_request))
        .route("/api/requests/{id}/status", get(get_status))
        .route("/api/requests/{id}/claim", post(claim_request))
        .route("/api/requests/{id}/response", post(respond_request))
        .route("/api/requests/{id}/wait", get(wait_request))
        .route("/api/events", get(events))
        .with_state(queue)
}

/// A running feedback server.
pub struct ExpertServer {
    pub addr: SocketAddr,
    pub queue: Arc<ExpertQueue>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<()>,
}

impl ExpertServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }

    /// Resolves when the server stops.
    pub async fn join(self) {
        let _ = self.task.await;
    }
}

pub async fn serve_expert(queue: Arc<ExpertQueue>, bind: &str) -> std::io::Result<ExpertServer> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let app = router(queue.clone());
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    Ok(ExpertServer { addr, queue, shutdown: Some(tx), task })
}

/// Client of a remote feedback server.
#[derive(Clone)]
pub struct HttpExpert {
    base: String,
    client: reqwest::Client,
}

impl HttpExpert {
    pub fn new(base_url: impl Into<String>) -> Self {
        let mut base = base_url.into();
        if !base.starts_with("http://") && !base.starts_with("https://") {
            base = format!("http://{base}");
        }
        Self {
            base: base.trim_end_matches('/').to_string(),
            client: reqwest::Client::builder()
                .connect_timeout(Duration::from_secs(5))
                .build()
                .expect("http client builds"),
        }
    }

    fn down(&self, e: impl std::fmt::Display) -> ToolError {
        unavailable(format!("expert feedback server {} is unreachable: {e}", self.base))
    }

    async fn decode<T: serde::de::DeserializeOwned>(
        &self,
        resp: reqwest::Response,
        id: Option<u64>,
    ) -> Result<T, ToolError> {
        let status = resp.status();
        let body: Value = resp.json().await.map_err(|e| self.down(e))?;
        if status.is_success() {
            return serde_json::from_value(body).map_err(|e| ToolError::execution(format!("malformed reply: {e}")));
        }
        let msg = body.get("error").and_then(Value::as_str).unwrap_or("request failed").to_string();
        let detail = json!({ "request_id": id, "http_status": status.as_u16() });
        Err(match status {
            StatusCode::NOT_FOUND => ToolError::not_found(msg).with_detail(detail),
            StatusCode::GONE => unavailable(msg).with_detail(json!({ "request_id": id, "status": "expired" })),
            StatusCode::REQUEST_TIMEOUT => unavailable(msg).with_detail(detail),
            StatusCode::BAD_REQUEST => ToolError::spec(msg),
            _ => ToolError::execution(msg).with_detail(detail),
        })
    }
}

#[async_trait]
impl ExpertService for HttpExpert {
    async fn submit(&self, question: &str, context: Value, timeout_seconds: f64) -> Result<ExpertRequest, ToolError> {
        let resp = self
            .client
            .post(format!("{}/api/requests", self.base))
            .json(&json!({ "question": question, "context": context, "timeout_seconds": timeout_seconds }))
            .send()
            .await
            .map_err(|e| self.down(e))?;
        self.decode(resp, None).await
    }

    async fn wait(&self, id: u64, timeout: Duration) -> Result<ExpertResponse, ToolError> {
        let resp = self
            .client
            .get(format!("{}/api/requests/{id}/wait?timeout={}", self.base, timeout.as_secs_f64()))
            .timeout(timeout + Duration::from_secs(10))
            .send()
            .await
            .map_err(|e| self.down(e))?;
        if resp.status() == StatusCode::REQUEST_TIMEOUT {
            return Err(consult_timeout(id, timeout, None));
        }
        self.decode(resp, Some(id)).await
    }

    async fn status(&self, id: u64) -> Result<StatusReport, ToolError> {
        let resp = self
            .client
            .get(format!("{}/api/requests/{id}/status", self.base))
            .send()
            .await
            .map_err(|e| self.down(e))?;
        self.decode(resp, Some(id)).await
    }

    async fn response(&self, id: u64) -> Result<ExpertResponse, ToolError> {
        let resp =
            self.client.get(format!("{}/api/requests/{id}", self.base)).send().await.map_err(|e| self.down(e))?;
        let request: ExpertRequest = self.decode(resp, Some(id)).await?;
        request.response.ok_or_else(|| QueueError::NotAnswered { id, status: request.status }.into())
    }
}
