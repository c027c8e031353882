//! The OpenAI-compatible client against an in-process HTTP stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};
use steproute_core::backend::{Backend, BackendError, OpenAiBackend, OpenAiConfig, Sampling, StepRequest};
use steproute_core::segmenter::{Boundary, Phase, SegmenterConfig};

struct Reply {
    status: u16,
    body: String,
}

impl Reply {
    fn json(v: Value) -> Self {
        Self { status: 200, body: v.to_string() }
    }

    fn sse(chunks: &[Value], done: bool) -> Self {
        let mut body = String::new();
        for c in chunks {
            body.push_str(&format!("data: {c}\n\n"));
        }
        if done {
            body.push_str("data: [DONE]\n\n");
        }
        Self { status: 200, body }
    }
}

type Handler = dyn Fn(usize, &str, &Value) -> Reply + Send + Sync;

struct Stub {
    url: String,
    requests: Arc<Mutex<Vec<(String, Value)>>>,
}

fn serve(handler: Box<Handler>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let log = requests.clone();
    let count = AtomicUsize::new(0);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            if reader.read_line(&mut request_line).is_err() {
                continue;
            }
            let path = request_line.split_whitespace().nth(1).unwrap_or("").to_owned();
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
            let n = count.fetch_add(1, Ordering::SeqCst);
            log.lock().unwrap().push((path.clone(), body.clone()));
            let reply = handler(n, &path, &body);
            let head = format!(
                "HTTP/1.1 {} X\r\ncontent-type: application/json\r\nconnection: close\r\n\r\n",
                reply.status
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(reply.body.as_bytes());
        }
    });
    Stub { url, requests }
}

fn backend(url: &str, attempts: u32) -> OpenAiBackend {
    let mut cfg = OpenAiConfig::new(url, "stub-model");
    cfg.max_attempts = attempts;
    cfg.backoff_ms = 1;
    OpenAiBackend::new(cfg).unwrap()
}

fn request<'a>(cfg: &'a SegmenterConfig, prefix: Option<&'a str>, logprobs: bool) -> StepRequest<'a> {
    StepRequest {
        context: "Q\n<think>\n",
        prefix,
        segmenter: cfg,
        phase: Phase::Thinking,
        max_new_tokens: 64,
        want_logprobs: logprobs,
        sampling: Sampling::default(),
    }
}

fn chunk(tokens: &[&str], finish: Option<&str>) -> Value {
    let top: Vec<Value> = tokens.iter().map(|t| json!({ *t: 0.5f64.ln(), "other": 0.5f64.ln() })).collect();
    json!({
        "choices": [{
            "text": tokens.concat(),
            "logprobs": {
                "tokens": tokens,
                "token_logprobs": tokens.iter().map(|_| 0.5f64.ln()).collect::<Vec<_>>(),
                "top_logprobs": top,
            },
            "finish_reason": finish,
        }]
    })
}

#[test]
fn probe_reads_top_logprobs() {
    let stub = serve(Box::new(|_, _, _| {
        Reply::json(json!({
            "choices": [{
                "text": "A",
                "logprobs": {
                    "tokens": ["A"],
                    "token_logprobs": [0.5f64.ln()],
                    "top_logprobs": [{"A": 0.5f64.ln(), "B": 0.25f64.ln(), "C": 0.25f64.ln()}],
                },
                "finish_reason": "length",
            }]
        }))
    }));
    let b = backend(&stub.url, 1);
    let probe = b.probe_first("Q", &Sampling::default()).unwrap();
    assert_eq!(probe.token, "A");
    let h = steproute_core::uncertainty::initial_token_entropy(&probe.dist);
    let oracle = -(0.5 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
    assert!((h - oracle).abs() < 1e-9);
    let reqs = stub.requests.lock().unwrap();
    assert_eq!(reqs[0].0, "/v1/completions");
    assert_eq!(reqs[0].1["max_tokens"], 1);
    assert_eq!(reqs[0].1["logprobs"], 20);
    assert_eq!(reqs[0].1["temperature"], 0.6);
    assert_eq!(reqs[0].1["top_p"], 0.95);
}

#[test]
fn probe_without_logprobs_is_an_error() {
    let stub = serve(Box::new(|_, _, _| Reply::json(json!({"choices": [{"text": "A"}]}))));
    let err = backend(&stub.url, 1).probe_first("Q", &Sampling::default()).unwrap_err();
    assert!(matches!(err, BackendError::MissingLogprobs), "{err}");
}

#[test]
fn streamed_step_stops_at_delimiter() {
    let stub = serve(Box::new(|_, _, _| {
        Reply::sse(
            &[chunk(&["Hello"], None), chunk(&[" world", "."], None), chunk(&["\n\n"], None), chunk(&["Next"], None)],
            true,
        )
    }));
    let cfg = SegmenterConfig::default();
    let out = backend(&stub.url, 1).generate_step(&request(&cfg, None, true)).unwrap();
    assert_eq!(out.text, "Hello world.\n\n");
    assert_eq!(out.boundary, Boundary::Delimiter);
    assert_eq!(out.tokens.len(), 4);
    let lp = out.logprobs.unwrap();
    assert_eq!(lp.len(), 4);
    assert!((lp.tokens()[0].entropy - 2f64.ln()).abs() < 1e-9);
    let body = &stub.requests.lock().unwrap()[0].1;
    assert_eq!(body["stream"], true);
    assert_eq!(body["prompt"], "Q\n<think>\n");
    assert_eq!(body["stop"], json!(["\n\n", "</think>"]));
}

#[test]
fn delegated_step_continues_from_probe() {
    let stub = serve(Box::new(|_, _, _| Reply::sse(&[chunk(&[",", " yes"], None), chunk(&["\n\n"], Some("stop"))], true)));
    let cfg = SegmenterConfig::default();
    let out = backend(&stub.url, 1).generate_step(&request(&cfg, Some("So"), false)).unwrap();
    assert_eq!(out.text, "So, yes\n\n");
    assert_eq!(out.tokens[0], "So");
    let body = &stub.requests.lock().unwrap()[0].1;
    assert_eq!(body["prompt"], "Q\n<think>\nSo");
    assert_eq!(body["max_tokens"], 63);
}

#[test]
fn stripped_stop_string_is_restored() {
    let stub = serve(Box::new(|_, _, _| {
        Reply::sse(
            &[
                chunk(&["Done", " thinking"], None),
                json!({"choices": [{"text": "", "finish_reason": "stop", "stop_reason": "</think>"}]}),
            ],
            true,
        )
    }));
    let cfg = SegmenterConfig::default();
    let out = backend(&stub.url, 1).generate_step(&request(&cfg, None, false)).unwrap();
    assert_eq!(out.text, "Done thinking</think>");
    assert_eq!(out.boundary, Boundary::ThinkClosed);
}

#[test]
fn length_finish_maps_to_budget() {
    let stub = serve(Box::new(|_, _, _| Reply::sse(&[chunk(&["partial", " step"], Some("length"))], true)));
    let cfg = SegmenterConfig::default();
    let out = backend(&stub.url, 1).generate_step(&request(&cfg, None, false)).unwrap();
    assert_eq!(out.text, "partial step");
    assert_eq!(out.boundary, Boundary::Budget);
}

#[test]
fn interrupted_stream_reports_partial_tokens() {
    let stub = serve(Box::new(|_, _, _| Reply::sse(&[chunk(&["cut", " off"], None)], false)));
    let cfg = SegmenterConfig::default();
    let err = backend(&stub.url, 1).generate_step(&request(&cfg, None, false)).unwrap_err();
    match err {
        BackendError::StreamInterrupted { partial, .. } => assert_eq!(partial, vec!["cut", " off"]),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn transient_errors_are_retried() {
    let stub = serve(Box::new(|n, _, _| {
        if n == 0 {
            Reply { status: 503, body: "busy".into() }
        } else {
            Reply::json(json!({"choices": [{"text": " \\boxed{4}", "finish_reason": "stop"}]}))
        }
    }));
    let out = backend(&stub.url, 3).generate_answer("ctx", 16, &Sampling::default()).unwrap();
    assert_eq!(out.text, " \\boxed{4}");
    assert_eq!(stub.requests.lock().unwrap().len(), 2);

    let stub = serve(Box::new(|_, _, _| Reply { status: 503, body: "busy".into() }));
    let err = backend(&stub.url, 1).generate_answer("ctx", 16, &Sampling::default()).unwrap_err();
    assert!(matches!(err, BackendError::Http { status: 503, .. }));
}

#[test]
fn client_errors_are_not_retried() {
    let stub = serve(Box::new(|_, _, _| Reply { status: 400, body: "bad".into() }));
    let err = backend(&stub.url, 3).generate_answer("ctx", 16, &Sampling::default()).unwrap_err();
    assert!(matches!(err, BackendError::Http { status: 400, .. }));
    assert_eq!(stub.requests.lock().unwrap().len(), 1);
}

#[test]
fn health_check_and_unreachable_endpoint() {
    let stub = serve(Box::new(|_, _, _| Reply::json(json!({"data": []}))));
    assert!(backend(&stub.url, 1).healthy());
    assert_eq!(stub.requests.lock().unwrap()[0].0, "/v1/models");

    let closed = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", closed.local_addr().unwrap());
    drop(closed);
    let b = backend(&url, 1);
    assert!(!b.healthy());
    assert!(matches!(b.probe_first("Q", &Sampling::default()), Err(BackendError::Transport(_))));
}
