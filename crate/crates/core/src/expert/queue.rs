//! The request queue: the single serialization point for consults, claims
//! and answers, with an append-only JSON-lines journal.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::{broadcast, Notify};

use super::{ExpertRequest, ExpertResponse, RequestStatus, ResponseInput};

/// Seconds since the Unix epoch.
pub type WallClock = Arc<dyn Fn() -> f64 + Send + Sync>;

pub fn system_wall_clock() -> WallClock {
    Arc::new(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueueError {
    #[error("no expert request with id {0}")]
    NotFound(u64),
    #[error("{0}")]
    Conflict(String),
    #[error("expert request {0} has expired")]
    Expired(u64),
    #[error("{0}")]
    Invalid(String),
    #[error("expert request {id} is not answered yet (status {status})")]
    NotAnswered { id: u64, status: RequestStatus },
    #[error("journal error: {0}")]
    Journal(String),
}

/// A journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum JournalEvent {
    Created { request: ExpertRequest },
    Claimed { id: u64, expert_id: String, at: f64 },
    Answered { id: u64, response: ExpertResponse, at: f64 },
    Expired { id: u64, at: f64 },
}

/// Status-change notification for live subscribers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueueEvent {
    pub kind: &'static str,
    pub request: ExpertRequest,
}

#[derive(Debug, Clone)]
pub struct QueueConfig {
    /// How long after its consult timeout a request still accepts answers.
    pub answer_grace: Duration,
    pub default_timeout_seconds: f64,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self { answer_grace: Duration::from_secs(24 * 3600), default_timeout_seconds: 3600.0 }
    }
}

struct Record {
    request: ExpertRequest,
    notify: Arc<Notify>,
}

struct State {
    next_id: u64,
    records: BTreeMap<u64, Record>,
}

pub struct ExpertQueue {
    state: Mutex<State>,
    journal: Option<Mutex<File>>,
    journal_path: Option<PathBuf>,
    events: broadcast::Sender<QueueEvent>,
    clock: WallClock,
    config: QueueConfig,
}

impl ExpertQueue {
    /// In-memory queue.
    pub fn new() -> Self {
        Self::build(None, None, system_wall_clock(), QueueConfig::default())
    }

    pub fn with_clock(clock: WallClock, config: QueueConfig) -> Self {
        Self::build(None, None, clock, config)
    }

    /// Journal-backed queue; existing events are replayed first.
    pub fn open(path: impl AsRef<Path>, clock: WallClock, config: QueueConfig) -> Result<Self, QueueError> {
        let path = path.as_ref().to_path_buf();
        let mut state = State { next_id: 1, records: BTreeMap::new() };
        if path.exists() {
            let f = File::open(&path).map_err(|e| QueueError::Journal(e.to_string()))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| QueueError::Journal(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: JournalEvent =
                    serde_json::from_str(&line).map_err(|e| QueueError::Journal(format!("line {}: {e}", i + 1)))?;
                replay(&mut state, event);
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| QueueError::Journal(e.to_string()))?;
        }
        let file =
            OpenOptions::new().create(true).append(true).open(&path).map_err(|e| QueueError::Journal(e.to_string()))?;
        let q = Self::build(Some(file), Some(path), clock, config);
        *q.state.lock() = state;
        Ok(q)
    }

    fn build(journal: Option<File>, journal_path: Option<PathBuf>, clock: WallClock, config: QueueConfig) -> Self {
        let (events, _) = broadcast::channel(1024);
        Self {
            state: Mutex::new(State { next_id: 1, records: BTreeMap::new() }),
            journal: journal.map(Mutex::new),
            journal_path,
            events,
            clock,
            config,
        }
    }

    pub fn journal_path(&self) -> Option<&Path> {
        self.journal_path.as_deref()
    }

    pub fn config(&self) -> &QueueConfig {
        &self.config
    }

    pub fn subscribe(&self) -> broadcast::Receiver<QueueEvent> {
        self.events.subscribe()
    }

    fn write(&self, event: &JournalEvent) -> Result<(), QueueError> {
        if let Some(j) = &self.journal {
            let mut line = serde_json::to_string(event).expect("journal event serializes");
            line.push('\n');
            let mut f = j.lock();
            f.write_all(line.as_bytes()).and_then(|_| f.flush()).map_err(|e| QueueError::Journal(e.to_string()))?;
        }
        Ok(())
    }

    fn emit(&self, kind: &'static str, request: &ExpertRequest) {
        let _ = self.events.send(QueueEvent { kind, request: request.clone() });
    }

    fn deadline(&self, r: &ExpertRequest) -> f64 {
        r.created_at + r.timeout_seconds + self.config.answer_grace.as_secs_f64()
    }

    /// Marks overdue open requests expired. Caller holds the state lock.
    fn expire_locked(&self, state: &mut State, now: f64) {
        let overdue: Vec<u64> = state
            .records
            .values()
            .filter(|r| r.request.status.is_open() && now > self.deadline(&r.request))
            .map(|r| r.request.id)
            .collect();
        for id in overdue {
            let rec = state.records.get_mut(&id).expect("overdue id exists");
            rec.request.status = RequestStatus::Expired;
            let _ = self.write(&JournalEvent::Expired { id, at: now });
            self.emit("expired", &rec.request);
            rec.notify.notify_waiters();
        }
    }

    pub fn create(
        &self,
        question: &str,
        context: Value,
        timeout_seconds: Option<f64>,
    ) -> Result<ExpertRequest, QueueError> {
        if question.trim().is_empty() {
            return Err(QueueError::Invalid("question must not be empty".into()));
        }
        let timeout_seconds = timeout_seconds.unwrap_or(self.config.default_timeout_seconds);
        if !(timeout_seconds.is_finite() && timeout_seconds > 0.0) {
            return Err(QueueError::Invalid("timeout_seconds must be a positive number".into()));
        }
        let now = (self.clock)();
        let mut state = self.state.lock();
        self.expire_locked(&mut state, now);
        let id = state.next_id;
        let request = ExpertRequest {
            id,
            question: question.to_string(),
            context,
            status: RequestStatus::Pending,
            created_at: now,
            answered_at: None,
            timeout_seconds,
            claimed_by: None,
            response: None,
        };
        self.write(&JournalEvent::Created { request: request.clone() })?;
        state.next_id += 1;
        state.records.insert(id, Record { request: request.clone(), notify: Arc::new(Notify::new()) });
        self.emit("created", &request);
        Ok(request)
    }

    /// Requests in creation order, optionally filtered by status.
    pub fn list(&self, status: Option<RequestStatus>) -> Vec<ExpertRequest> {
        let now = (self.clock)();
        let mut state = self.state.lock();
        self.expire_locked(&mut state, now);
        state
            .records
            .values()
            .filter(|r| status.is_none_or(|s| r.request.status == s))
            .map(|r| r.request.clone())
            .collect()
    }

    pub fn get(&self, id: u64) -> Result<ExpertRequest, QueueError> {
        let now = (self.clock)();
        let mut state = self.state.lock();
        self.expire_locked(&mut state, now);
        state.records.get(&id).map(|r| r.request.clone()).ok_or(QueueError::NotFound(id))
    }

    /// Status plus the 1-based FIFO position among pending requests.
    pub fn status(&self, id: u64) -> Result<(RequestStatus, Option<usize>), QueueError> {
        let now = (self.clock)();
        let mut state = self.state.lock();
        self.expire_locked(&mut state, now);
        let rec = state.records.get(&id).ok_or(QueueError::NotFound(id))?;
        let status = rec.request.status;
        let position = (status == RequestStatus::Pending).then(|| {
            state.records.values().filter(|r| r.request.status == RequestStatus::Pending && r.request.id <= id).count()
        });
        Ok((status, position))
    }

    /// Advisory claim; repeating it by the same expert is a no-op.
    pub fn claim(&self, id: u64, expert_id: &str) -> Result<ExpertRequest, QueueError> {
        if expert_id.trim().is_empty() {
            return Err(QueueError::Invalid("expert_id must not be empty".into()));
        }
        let now = (self.clock)();
        let mut state = self.state.lock();
        self.expire_locked(&mut state, now);
        let rec = state.records.get_mut(&id).ok_or(QueueError::NotFound(id))?;
        match rec.request.status {
            RequestStatus::Expired => Err(QueueError::Expired(id)),
            RequestStatus::Answered => Err(QueueError::Conflict(format!("expert request {id} is already answered"))),
            RequestStatus::Claimed if rec.request.claimed_by.as_deref() == Some(expert_id) => Ok(rec.request.clone()),
            RequestStatus::Claimed => Err(QueueError::Conflict(format!(
                "expert request {id} is already claimed by {}",
                rec.request.claimed_by.as_deref().unwrap_or("another expert")
            ))),
            RequestStatus::Pending => {
                self.write(&JournalEvent::Claimed { id, expert_id: expert_id.to_string(), at: now })?;
                rec.request.status = RequestStatus::Claimed;
                rec.request.claimed_by = Some(expert_id.to_string());
                self.emit("claimed", &rec.request);
                Ok(rec.request.clone())
            }
        }
    }

    /// Records the one answer a request can have. Unclaimed requests are
    /// claimed implicitly by the responder.
    pub fn respond(&self, id: u64, input: ResponseInput) -> Result<ExpertRequest, QueueError> {
        input.check().map_err(QueueError::Invalid)?;
        let now = (self.clock)();
        let mut state = self.state.lock();
        self.expire_locked(&mut state, now);
        let rec = state.records.get_mut(&id).ok_or(QueueError::NotFound(id))?;
        match rec.request.status {
            RequestStatus::Expired => return Err(QueueError::Expired(id)),
            RequestStatus::Answered => {
                return Err(QueueError::Conflict(format!("expert request {id} is already answered")))
            }
            RequestStatus::Pending | RequestStatus::Claimed => {}
        }
        let response =
            ExpertResponse { request_id: id, verdict: input.verdict, text: input.text, expert_id: input.expert_id };
        self.write(&JournalEvent::Answered { id, response: response.clone(), at: now })?;
        apply_answer(&mut rec.request, response, now);
        self.emit("answered", &rec.request);
        rec.notify.notify_waiters();
        Ok(rec.request.clone())
    }

    pub fn response(&self, id: u64) -> Result<ExpertResponse, QueueError> {
        let r = self.get(id)?;
        r.response.ok_or(QueueError::NotAnswered { id, status: r.status })
    }

    /// Blocks until the request is answered, expires or `timeout` passes.
    pub async fn wait(&self, id: u64, timeout: Duration) -> Result<ExpertResponse, QueueError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let notify = {
                let state = self.state.lock();
                state.records.get(&id).ok_or(QueueError::NotFound(id))?.notify.clone()
            };
            let notified = notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            let r = self.get(id)?;
            match r.status {
                RequestStatus::Answered => return Ok(r.response.expect("answered requests carry a response")),
                RequestStatus::Expired => return Err(QueueError::Expired(id)),
                _ => {}
            }
            if tokio::time::timeout_at(deadline, notified).await.is_err() {
                return Err(QueueError::NotAnswered { id, status: r.status });
            }
        }
    }
}

impl Default for ExpertQueue {
    fn default() -> Self {
        Self::new()
    }
}

fn apply_answer(request: &mut ExpertRequest, response: ExpertResponse, at: f64) {
    if request.claimed_by.is_none() {
        request.claimed_by = Some(response.expert_id.clone());
    }
    request.status = RequestStatus::Answered;
    request.answered_at = Some(at);
    request.response = Some(response);
}

fn replay(state: &mut State, event: JournalEvent) {
    match event {
        JournalEvent::Created { request } => {
            state.next_id = state.next_id.max(request.id + 1);
            state.records.insert(request.id, Record { request, notify: Arc::new(Notify::new()) });
        }
        JournalEvent::Claimed { id, expert_id, .. } => {
            if let Some(r) = state.records.get_mut(&id) {
                r.request.status = RequestStatus::Claimed;
                r.request.claimed_by = Some(expert_id);
            }
        }
        JournalEvent::Answered { id, response, at } => {
            if let Some(r) = state.records.get_mut(&id) {
                apply_answer(&mut r.request, response, at);
            }
        }
        JournalEvent::Expired { id, .. } => {
            if let Some(r) = state.records.get_mut(&id) {
                r.request.status = RequestStatus::Expired;
            }
        }
    }
}
