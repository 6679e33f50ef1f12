mod common;

use std::sync::Arc;

use common::demo::{callable_specs, demo_hub, valid_call};
use common::wire::{body, frozen_demo_hub, load_session, replay_framed, save_session};
use rand::rngs::StdRng;
use rand::SeedableRng;
use toolhub::wire::{import_remote, serve_connection, serve_http, serve_tcp, RemoteClient, RpcService};
use toolhub::{Hub, ToolResult};

/// Local and proxied results must agree: payloads byte for byte, errors
/// field for field.
async fn assert_transparent(remote: &Hub, label: &str) {
    let local = demo_hub();
    let mut rng = StdRng::seed_from_u64(0x3A7E);
    let specs = callable_specs(&local);
    assert!(specs.len() >= 20);
    let mut compared = 0;
    for spec in &specs {
        assert!(remote.registry().contains(&spec.name), "{label}: {} not imported", spec.name);
        for _ in 0..5 {
            let call = valid_call(&mut rng, spec);
            let here = local.call(call.clone()).await;
            let there = remote.call(call.clone()).await;
            match (&here.outcome, &there.outcome) {
                (Ok(a), Ok(b)) => assert_eq!(
                    serde_json::to_string(a).unwrap(),
                    serde_json::to_string(b).unwrap(),
                    "{label}: {}",
                    call.to_json()
                ),
                (Err(a), Err(b)) => assert_eq!(a, b, "{label}: {}", call.to_json()),
                _ => panic!("{label}: {} -> {here:?} vs {there:?}", call.to_json()),
            }
            compared += 1;
        }
    }
    assert_eq!(compared, specs.len() * 5);
}

fn ok_share(results: &[ToolResult]) -> f64 {
    results.iter().filter(|r| r.is_ok()).count() as f64 / results.len() as f64
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn proxy_over_stdio_pipes_is_transparent() {
    let client = RemoteClient::in_process("stdio-pipe", RpcService::new(demo_hub()));
    let hub = Hub::new();
    let import = import_remote(hub.registry(), Arc::new(client)).await.unwrap();
    assert!(import.skipped.is_empty());
    assert_transparent(&hub, "stdio").await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn proxy_over_tcp_is_transparent() {
    let server = serve_tcp(RpcService::new(demo_hub()), "127.0.0.1:0").await.unwrap();
    let hub = Hub::new();
    hub.register_remote(&server.endpoint().unwrap()).await.unwrap();
    assert_transparent(&hub, "tcp").await;
    server.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn proxy_over_http_is_transparent() {
    let server = serve_http(RpcService::new(demo_hub()), "127.0.0.1:0").await.unwrap();
    let hub = Hub::new();
    hub.register_remote(&server.endpoint().unwrap()).await.unwrap();
    assert_transparent(&hub, "http").await;
    server.shutdown().await;
}

#[tokio::test]
async fn generated_calls_mostly_succeed() {
    let hub = demo_hub();
    let mut rng = StdRng::seed_from_u64(0x3A7E);
    let mut results = Vec::new();
    for spec in callable_specs(&hub) {
        for _ in 0..5 {
            results.push(hub.call(valid_call(&mut rng, &spec)).await);
        }
    }
    // Errors are compared too, but the corpus should exercise payloads.
    assert!(ok_share(&results) > 0.5, "{}", ok_share(&results));
}

#[tokio::test]
async fn golden_session_replays_over_pipes() {
    let mut exchanges = load_session();
    let (client, server) = tokio::io::duplex(1 << 16);
    let (sr, sw) = tokio::io::split(server);
    tokio::spawn(serve_connection(RpcService::new(frozen_demo_hub()), sr, sw));
    let (cr, cw) = tokio::io::split(client);
    let replies = replay_framed(cr, cw, &exchanges).await;
    if std::env::var_os("TOOLHUB_BLESS").is_some() {
        for (e, r) in exchanges.iter_mut().zip(replies) {
            e.expect = r;
        }
        save_session(&exchanges);
        return;
    }
    for (e, r) in exchanges.iter().zip(&replies) {
        assert_eq!(&e.expect, r, "{}", e.note);
    }
}

#[tokio::test]
async fn golden_session_replays_over_tcp() {
    let exchanges = load_session();
    let server = serve_tcp(RpcService::new(frozen_demo_hub()), "127.0.0.1:0").await.unwrap();
    let stream = tokio::net::TcpStream::connect(server.addr.unwrap()).await.unwrap();
    let (r, w) = stream.into_split();
    let replies = replay_framed(r, w, &exchanges).await;
    for (e, r) in exchanges.iter().zip(&replies) {
        assert_eq!(&e.expect, r, "{}", e.note);
    }
    server.shutdown().await;
}

#[tokio::test]
async fn golden_session_bodies_replay_over_http() {
    let exchanges = load_session();
    let server = serve_http(RpcService::new(frozen_demo_hub()), "127.0.0.1:0").await.unwrap();
    let url = format!("{}/rpc", server.endpoint().unwrap());
    let client = reqwest::Client::new();
    for e in &exchanges {
        let response = client.post(&url).body(body(&e.send).to_string()).send().await.unwrap();
        match &e.expect {
            Some(frame) => {
                assert_eq!(response.status(), 200, "{}", e.note);
                assert_eq!(response.text().await.unwrap(), body(frame), "{}", e.note);
            }
            None => assert_eq!(response.status(), 204, "{}", e.note),
        }
    }
    server.shutdown().await;
}
