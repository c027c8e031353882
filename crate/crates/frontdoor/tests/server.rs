//! End-to-end tests of the HTTP proxy over scripted backends.

use std::path::PathBuf;
use std::sync::Arc;

use serde_json::{json, Value};
use steproute::config::ServiceConfig;
use steproute::server::{bind, serve_with, AppState};
use steproute_core::backend::openai::OpenAiConfig;
use steproute_core::backend::{Backend, OpenAiBackend};
use steproute_core::record::read_jsonl;
use steproute_core::sim::{Scenario, ScriptedBackend};

fn gridpath() -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/demo_gridpath.json");
    Scenario::load(&path).unwrap()
}

struct Harness {
    base: String,
    sink: PathBuf,
    _dir: tempfile::TempDir,
}

async fn start(config: ServiceConfig, small: Arc<dyn Backend>, large: Arc<dyn Backend>) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let sink = dir.path().join("traces.jsonl");
    let config = ServiceConfig { trace_sink: Some(sink.clone()), ..config };
    let listener = bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(serve_with(listener, AppState::new(config, small, large)));
    Harness { base, sink, _dir: dir }
}

async fn scripted(fail_large_after: Option<usize>) -> (Harness, Scenario) {
    let scenario = gridpath();
    let config = ServiceConfig::default();
    let (small, large) = ScriptedBackend::pair(&scenario, &config.router);
    let large = match fail_large_after {
        Some(n) => large.failing_after(n),
        None => large,
    };
    (start(config, Arc::new(small), Arc::new(large)).await, scenario)
}

fn chat(question: &str) -> Value {
    json!({ "model": "routed", "messages": [{ "role": "user", "content": question }] })
}

#[tokio::test(flavor = "multi_thread")]
async fn chat_completion_routes_and_persists_one_record() {
    let (h, scenario) = scripted(None).await;
    let client = reqwest::Client::new();
    let resp = client.post(format!("{}/v1/chat/completions", h.base)).json(&chat(&scenario.question)).send().await.unwrap();
    assert_eq!(resp.status(), 200);
    let body: Value = resp.json().await.unwrap();
    let content = body["choices"][0]["message"]["content"].as_str().unwrap();
    assert_eq!(body["choices"][0]["message"]["role"], "assistant");
    assert!(content.starts_with("<think>\n"), "{content}");
    assert!(content.contains("five straight segments"));
    assert!(content.contains("</think>"));
    assert!(content.contains("\\boxed{294}"));
    assert_eq!(body["routing"]["steps"], 6);

    let records = read_jsonl(&h.sink).unwrap();
    assert_eq!(records.len(), 1);
    let id = body["trace_id"].as_str().unwrap();
    assert_eq!(records[0].id, id);
    records[0].validate().unwrap();
    assert_eq!(records[0].rows.len(), 6);

    let fetched: Value = client.get(format!("{}/v1/traces/{id}", h.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(fetched["id"], id);
    assert_eq!(fetched["rows"][3]["action"], "intervene");
    let missing = client.get(format!("{}/v1/traces/nope", h.base)).send().await.unwrap();
    assert_eq!(missing.status(), 404);
}

#[tokio::test(flavor = "multi_thread")]
async fn reasoning_can_be_left_out() {
    let scenario = gridpath();
    let config = ServiceConfig { include_reasoning: false, ..ServiceConfig::default() };
    let (small, large) = ScriptedBackend::pair(&scenario, &config.router);
    let h = start(config, Arc::new(small), Arc::new(large)).await;
    let body: Value = reqwest::Client::new()
        .post(format!("{}/v1/chat/completions", h.base))
        .json(&chat(&scenario.question))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    let content = body["choices"][0]["message"]["content"].as_str().unwrap();
    assert!(!content.contains("<think>"));
    assert!(content.contains("\\boxed{294}"));
}

#[tokio::test(flavor = "multi_thread")]
async fn large_backend_failure_maps_to_502_with_partial_record() {
    // the large model writes step 4 and then goes down before the answer
    let (h, scenario) = scripted(Some(1)).await;
    let resp = reqwest::Client::new()
        .post(format!("{}/v1/chat/completions", h.base))
        .json(&chat(&scenario.question))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 502);
    let body: Value = resp.json().await.unwrap();
    let id = body["trace_id"].as_str().unwrap();
    let records = read_jsonl(&h.sink).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].id, id);
    assert!(records[0].failure.as_deref().unwrap().contains("large"));
    assert!(records[0].final_answer.is_none());
    assert_eq!(records[0].rows.len(), 6);
    records[0].validate().unwrap();
}

#[tokio::test(flavor = "multi_thread")]
async fn request_without_user_message_is_rejected() {
    let (h, _) = scripted(None).await;
    let resp = reqwest::Client::new()
        .post(format!("{}/v1/chat/completions", h.base))
        .json(&json!({ "messages": [{ "role": "system", "content": "hi" }] }))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 400);
    assert!(!h.sink.exists());
}

#[tokio::test(flavor = "multi_thread")]
async fn health_reports_each_backend() {
    let (h, _) = scripted(None).await;
    let ok: Value = reqwest::get(format!("{}/healthz", h.base)).await.unwrap().json().await.unwrap();
    assert_eq!(ok, json!({ "status": "ok", "small": true, "large": true }));

    let scenario = gridpath();
    let config = ServiceConfig::default();
    let (small, _) = ScriptedBackend::pair(&scenario, &config.router);
    let mut down = OpenAiConfig::new("http://127.0.0.1:9", "absent");
    down.timeout_ms = 500;
    down.max_attempts = 1;
    let large = tokio::task::spawn_blocking(move || OpenAiBackend::new(down).unwrap()).await.unwrap();
    let h = start(config, Arc::new(small), Arc::new(large)).await;
    let degraded: Value = reqwest::get(format!("{}/healthz", h.base)).await.unwrap().json().await.unwrap();
    assert_eq!(degraded, json!({ "status": "degraded", "small": true, "large": false }));
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_requests_each_get_a_record() {
    let (h, scenario) = scripted(None).await;
    let client = reqwest::Client::new();
    let mut tasks = Vec::new();
    for _ in 0..8 {
        let (client, url, body) = (client.clone(), format!("{}/v1/chat/completions", h.base), chat(&scenario.question));
        tasks.push(tokio::spawn(async move { client.post(url).json(&body).send().await.unwrap().status() }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), 200);
    }
    let records = read_jsonl(&h.sink).unwrap();
    assert_eq!(records.len(), 8);
    for r in &records {
        r.validate().unwrap();
    }
}
