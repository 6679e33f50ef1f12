mod common;

use std::sync::Arc;
use std::time::Duration;

use common::expert::{answer_first_pending, consult_round_trip, loopback_server, race};
use parking_lot::Mutex;
use serde_json::{json, Value};
use toolhub::expert::{
    ExpertQueue, JournalEvent, QueueConfig, QueueError, RequestStatus, ResponseInput, Verdict, WallClock,
};

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn consult_unblocks_on_http_answer() {
    let (result, elapsed) = consult_round_trip().await;
    assert!(elapsed < Duration::from_secs(2), "{elapsed:?}");
    assert_eq!(
        result.payload(),
        Some(&json!({"request_id": 1, "verdict": "approve", "text": "Looks good.", "expert_id": "chemist-1"}))
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn sixteen_way_race_records_one_answer() {
    let queue = Arc::new(ExpertQueue::new());
    let server = loopback_server(queue.clone()).await;
    for _ in 0..10 {
        let tally = race(&server.url(), &queue, 16).await;
        assert_eq!((tally.claims_ok, tally.claims_conflict), (1, 15), "{tally:?}");
        assert_eq!((tally.answers_ok, tally.answers_conflict), (1, 15), "{tally:?}");
        assert!(tally.winner_recorded);
    }
    assert_eq!(queue.list(Some(RequestStatus::Answered)).len(), 10);
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn racing_journal_holds_one_answer_per_request() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("journal.jsonl");
    let queue =
        Arc::new(ExpertQueue::open(&path, toolhub::expert::system_wall_clock(), QueueConfig::default()).unwrap());
    let server = loopback_server(queue.clone()).await;
    for _ in 0..4 {
        race(&server.url(), &queue, 16).await;
    }
    server.shutdown().await;
    let answered = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<JournalEvent>(l).unwrap())
        .filter(|e| matches!(e, JournalEvent::Answered { .. }))
        .count();
    assert_eq!(answered, 4);
}

fn manual_clock(start: f64) -> (Arc<Mutex<f64>>, WallClock) {
    let now = Arc::new(Mutex::new(start));
    let read = now.clone();
    (now, Arc::new(move || *read.lock()))
}

fn answer(expert: &str, verdict: Verdict) -> ResponseInput {
    ResponseInput { verdict, text: "noted".into(), expert_id: expert.into() }
}

#[tokio::test]
async fn journal_replay_restores_state_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("expert").join("journal.jsonl");
    let config = QueueConfig { answer_grace: Duration::from_secs(10), ..Default::default() };
    let (now, clock) = manual_clock(1_000.0);
    let before = {
        let q = ExpertQueue::open(&path, clock.clone(), config.clone()).unwrap();
        let a = q.create("Approve CPD-001?", json!({"ids": ["CPD-001"]}), Some(5.0)).unwrap().id;
        let b = q.create("Approve CPD-002?", Value::Null, Some(500.0)).unwrap().id;
        let c = q.create("Approve CPD-003?", Value::Null, Some(500.0)).unwrap().id;
        let d = q.create("Approve CPD-004?", Value::Null, Some(500.0)).unwrap().id;
        q.claim(b, "chemist-1").unwrap();
        q.claim(c, "chemist-2").unwrap();
        q.respond(c, answer("chemist-2", Verdict::Reject)).unwrap();
        q.respond(d, answer("chemist-3", Verdict::Approve)).unwrap();
        *now.lock() = 1_020.0;
        assert_eq!(q.get(a).unwrap().status, RequestStatus::Expired);
        q.list(None)
    };
    let q = ExpertQueue::open(&path, clock, config).unwrap();
    assert_eq!(q.list(None), before);
    let statuses: Vec<RequestStatus> = before.iter().map(|r| r.status).collect();
    assert_eq!(
        statuses,
        [RequestStatus::Expired, RequestStatus::Claimed, RequestStatus::Answered, RequestStatus::Answered]
    );
    // Rules still hold after the restart.
    assert!(matches!(q.respond(3, answer("chemist-9", Verdict::Approve)), Err(QueueError::Conflict(_))));
    assert!(matches!(q.claim(1, "chemist-9"), Err(QueueError::Expired(1))));
    assert!(matches!(q.claim(2, "chemist-9"), Err(QueueError::Conflict(_))));
    assert_eq!(q.create("Next?", Value::Null, None).unwrap().id, 5);
    q.respond(2, answer("chemist-1", Verdict::Approve)).unwrap();

    // The restarted queue serves the same records over HTTP.
    let server = loopback_server(Arc::new(q)).await;
    let record: Value = reqwest::get(format!("{}/api/requests/3", server.url())).await.unwrap().json().await.unwrap();
    assert_eq!(record, serde_json::to_value(&before[2]).unwrap());
    server.shutdown().await;
}

#[tokio::test]
async fn http_status_codes() {
    let (now, clock) = manual_clock(0.0);
    let queue =
        Arc::new(ExpertQueue::with_clock(clock, QueueConfig { answer_grace: Duration::ZERO, ..Default::default() }));
    let server = loopback_server(queue.clone()).await;
    let base = server.url();
    let http = reqwest::Client::new();
    let post = |path: &str, body: Value| http.post(format!("{base}{path}")).json(&body).send();

    let created = post("/api/requests", json!({"question": "Ok?", "timeout_seconds": 5})).await.unwrap();
    assert_eq!(created.status(), 201);
    assert_eq!(post("/api/requests", json!({"question": ""})).await.unwrap().status(), 400);
    assert_eq!(post("/api/requests", json!({"q": "x"})).await.unwrap().status(), 400);
    assert_eq!(http.get(format!("{base}/api/requests/99")).send().await.unwrap().status(), 404);
    assert_eq!(http.get(format!("{base}/api/requests?status=bogus")).send().await.unwrap().status(), 400);
    let status: Value = http.get(format!("{base}/api/requests/1/status")).send().await.unwrap().json().await.unwrap();
    assert_eq!(status, json!({"request_id": 1, "status": "pending", "position": 1}));
    let wait = http.get(format!("{base}/api/requests/1/wait?timeout=0.05")).send().await.unwrap();
    assert_eq!(wait.status(), 408);

    let respond = json!({"verdict": "approve", "text": "", "expert_id": "e1"});
    assert_eq!(post("/api/requests/1/claim", json!({"expert_id": "e1"})).await.unwrap().status(), 200);
    assert_eq!(post("/api/requests/1/claim", json!({"expert_id": "e1"})).await.unwrap().status(), 200);
    assert_eq!(post("/api/requests/1/claim", json!({"expert_id": "e2"})).await.unwrap().status(), 409);
    assert_eq!(
        post("/api/requests/1/response", json!({"verdict": "free-text", "text": " ", "expert_id": "e1"}))
            .await
            .unwrap()
            .status(),
        400
    );
    assert_eq!(post("/api/requests/1/response", respond.clone()).await.unwrap().status(), 200);
    assert_eq!(post("/api/requests/1/response", respond.clone()).await.unwrap().status(), 409);
    assert_eq!(post("/api/requests/1/claim", json!({"expert_id": "e3"})).await.unwrap().status(), 409);

    post("/api/requests", json!({"question": "Late?", "timeout_seconds": 5})).await.unwrap();
    *now.lock() = 6.0;
    assert_eq!(post("/api/requests/2/response", respond.clone()).await.unwrap().status(), 410);
    assert_eq!(post("/api/requests/2/claim", json!({"expert_id": "e1"})).await.unwrap().status(), 410);
    server.shutdown().await;
}

/// Reads the event stream until `needle` has been seen, within `limit`.
async fn read_events_until(resp: &mut reqwest::Response, needle: &str, seen: &mut String, limit: Duration) -> bool {
    tokio::time::timeout(limit, async {
        while !seen.contains(needle) {
            match resp.chunk().await.unwrap() {
                Some(bytes) => seen.push_str(&String::from_utf8_lossy(&bytes)),
                None => return false,
            }
        }
        true
    })
    .await
    .unwrap_or(false)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn event_stream_reports_new_and_answered_requests() {
    let queue = Arc::new(ExpertQueue::new());
    let server = loopback_server(queue.clone()).await;
    let base = server.url();
    let mut events = reqwest::get(format!("{base}/api/events")).await.unwrap();
    assert_eq!(events.status(), 200);
    assert!(events.headers()["content-type"].to_str().unwrap().starts_with("text/event-stream"));

    let http = reqwest::Client::new();
    http.post(format!("{base}/api/requests")).json(&json!({"question": "Ship it?"})).send().await.unwrap();
    let mut seen = String::new();
    assert!(read_events_until(&mut events, "event: created", &mut seen, Duration::from_secs(2)).await, "{seen}");
    assert!(read_events_until(&mut events, "\"question\":\"Ship it?\"", &mut seen, Duration::from_secs(2)).await);

    let answered = tokio::spawn({
        let base = base.clone();
        async move { answer_first_pending(&base, "e1", "approve", "yes").await }
    });
    assert!(read_events_until(&mut events, "event: answered", &mut seen, Duration::from_secs(2)).await, "{seen}");
    answered.await.unwrap();
    let kinds: Vec<&str> = seen.lines().filter_map(|l| l.strip_prefix("event: ")).collect();
    assert_eq!(kinds, ["created", "claimed", "answered"]);
    drop(events);
    server.shutdown().await;
}

#[tokio::test]
async fn consult_over_http_times_out_with_request_id() {
    let queue = Arc::new(ExpertQueue::new());
    let server = loopback_server(queue.clone()).await;
    let hub = toolhub::Hub::new();
    toolhub::expert::tools::attach_expert(&hub, Arc::new(toolhub::expert::HttpExpert::new(server.url()))).unwrap();
    let r = hub.call_json("consult_human_expert", json!({"question": "Anyone?", "timeout_seconds": 0.1})).await;
    let e = r.error().unwrap();
    assert_eq!(e.code, toolhub::ErrorCode::ExpertUnavailable);
    assert_eq!(e.detail.as_ref().unwrap()["request_id"], 1);
    // The late answer is still retrievable.
    queue.respond(1, answer("e1", Verdict::Approve)).unwrap();
    let late = hub.call_json("get_expert_response", json!({"request_id": 1})).await;
    assert_eq!(late.payload().unwrap()["verdict"], "approve");
    server.shutdown().await;
}
