//! OpenAI-compatible chat-completions proxy over the step router.
//!
//! Each request gets its own routing loop on the blocking pool; the backends
//! are synchronous clients. The response is one assistant message holding the
//! think-phase text (optional) and the large model's answer.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router as HttpRouter};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use steproute_core::backend::{Backend, OpenAiBackend};
use steproute_core::record::TraceRecord;
use steproute_core::routing::{RouteError, Router, RouterConfig};
use steproute_core::trace::Trace;
use thiserror::Error;
use tokio::net::TcpListener;
use tracing::{error, info, warn};

use crate::config::{ConfigError, ServiceConfig};
use crate::sink::{new_record, TraceSink};

pub const DEFAULT_SINK: &str = "traces.jsonl";

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("cannot build backend: {0}")]
    Backend(String),

    #[error("cannot bind {addr}: {reason}")]
    Bind { addr: String, reason: String },

    #[error("server error: {0}")]
    Io(String),
}

#[derive(Clone)]
pub struct AppState {
    pub small: Arc<dyn Backend>,
    pub large: Arc<dyn Backend>,
    pub config: Arc<ServiceConfig>,
    pub sink: Arc<TraceSink>,
}

impl AppState {
    pub fn new(config: ServiceConfig, small: Arc<dyn Backend>, large: Arc<dyn Backend>) -> Self {
        let sink = config.trace_sink.clone().unwrap_or_else(|| DEFAULT_SINK.into());
        Self { small, large, sink: Arc::new(TraceSink::new(sink)), config: Arc::new(config) }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ChatRequest {
    #[serde(default)]
    pub model: Option<String>,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub max_tokens: Option<usize>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub top_p: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct Choice {
    index: usize,
    message: Value,
    finish_reason: &'static str,
}

pub fn app(state: AppState) -> HttpRouter {
    HttpRouter::new()
        .route("/v1/chat/completions", post(chat_completions))
        .route("/v1/traces/{id}", get(get_trace))
        .route("/healthz", get(healthz))
        .with_state(state)
}

fn error_body(status: StatusCode, kind: &str, message: String, trace_id: Option<String>) -> Response {
    let mut body = json!({ "error": { "message": message, "type": kind } });
    if let Some(id) = trace_id {
        body["trace_id"] = json!(id);
    }
    (status, Json(body)).into_response()
}

/// The question is the last user message; earlier system messages are
/// prepended, separated by blank lines.
fn question_of(messages: &[ChatMessage]) -> Option<String> {
    let last_user = messages.iter().rposition(|m| m.role == "user")?;
    let mut parts: Vec<&str> =
        messages[..last_user].iter().filter(|m| m.role == "system").map(|m| m.content.as_str()).collect();
    parts.push(&messages[last_user].content);
    Some(parts.join("\n\n"))
}

pub fn composite_content(trace: &Trace, config: &RouterConfig, include_reasoning: bool) -> String {
    let answer = trace.final_answer();
    if !include_reasoning {
        return answer.trim_start().to_owned();
    }
    let seg = &config.segmenter;
    let mut out = format!("{}\n{}", seg.think_open, trace.think_text());
    if trace.answer.as_ref().is_some_and(|a| a.closed_by_router) {
        out.push_str(&seg.think_close);
    }
    out.push_str(answer);
    out
}

async fn chat_completions(State(state): State<AppState>, Json(req): Json<ChatRequest>) -> Response {
    let Some(question) = question_of(&req.messages) else {
        return error_body(StatusCode::BAD_REQUEST, "invalid_request_error", "no user message".into(), None);
    };
    let mut config = state.config.router.clone();
    if let Some(t) = req.temperature {
        config.policy.sampling.temperature = t;
    }
    if let Some(p) = req.top_p {
        config.policy.sampling.top_p = p;
    }
    if let Some(m) = req.max_tokens {
        config.policy.answer_max_tokens = m;
    }
    if let Err(e) = config.validate() {
        return error_body(StatusCode::BAD_REQUEST, "invalid_request_error", e, None);
    }

    let (small, large) = (state.small.clone(), state.large.clone());
    let routing_config = config.clone();
    let joined =
        tokio::task::spawn_blocking(move || Router::new(&*small, &*large, &routing_config)?.run_trace(&question))
            .await;
    let result = match joined {
        Ok(r) => r,
        Err(e) => return error_body(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string(), None),
    };

    let sink = state.sink.clone();
    match result {
        Ok(trace) => {
            let record = new_record(&trace);
            persist(sink, record.clone()).await;
            info!(trace_id = %record.id, steps = trace.steps.len(), interventions = trace.interventions(), "routed");
            let content = composite_content(&trace, &config, state.config.include_reasoning);
            let completion = trace.think_tokens() + trace.answer.as_ref().map_or(0, |a| a.token_count);
            let body = json!({
                "id": format!("chatcmpl-{}", record.id),
                "object": "chat.completion",
                "created": chrono::Utc::now().timestamp(),
                "model": req.model.unwrap_or_else(|| "steproute".into()),
                "choices": [Choice {
                    index: 0,
                    message: json!({ "role": "assistant", "content": content }),
                    finish_reason: "stop",
                }],
                "usage": { "completion_tokens": completion },
                "trace_id": record.id,
                "routing": {
                    "policy": trace.policy,
                    "threshold": trace.threshold,
                    "steps": trace.steps.len(),
                    "intervention_rate": trace.accounting.intervention_rate,
                },
            });
            (StatusCode::OK, Json(body)).into_response()
        }
        Err(e @ RouteError::Config(_)) => error_body(StatusCode::BAD_REQUEST, "invalid_request_error", e.to_string(), None),
        Err(e @ RouteError::Backend { .. }) => {
            let partial = e.partial_trace().cloned().expect("backend failures carry a partial trace");
            let record = new_record(&partial);
            let id = record.id.clone();
            persist(sink, record).await;
            warn!(trace_id = %id, "routing failed: {e}");
            error_body(StatusCode::BAD_GATEWAY, "upstream_error", e.to_string(), Some(id))
        }
    }
}

async fn persist(sink: Arc<TraceSink>, record: TraceRecord) {
    let id = record.id.clone();
    match tokio::task::spawn_blocking(move || sink.append(&record)).await {
        Ok(Ok(())) => {}
        Ok(Err(e)) => error!(trace_id = %id, "cannot persist trace: {e}"),
        Err(e) => error!(trace_id = %id, "cannot persist trace: {e}"),
    }
}

async fn get_trace(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let sink = state.sink.clone();
    let lookup = tokio::task::spawn_blocking(move || sink.find(&id)).await;
    match lookup {
        Ok(Ok(Some(record))) => (StatusCode::OK, Json(record)).into_response(),
        Ok(Ok(None)) => error_body(StatusCode::NOT_FOUND, "not_found", "no such trace".into(), None),
        Ok(Err(e)) => error_body(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string(), None),
        Err(e) => error_body(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string(), None),
    }
}

async fn healthz(State(state): State<AppState>) -> Response {
    let (small, large) = (state.small.clone(), state.large.clone());
    let (s, l) = tokio::task::spawn_blocking(move || (small.healthy(), large.healthy())).await.unwrap_or((false, false));
    let status = if s && l { "ok" } else { "degraded" };
    (StatusCode::OK, Json(json!({ "status": status, "small": s, "large": l }))).into_response()
}

/// Serves on an already bound listener until the task is dropped.
pub async fn serve_with(listener: TcpListener, state: AppState) -> Result<(), ServeError> {
    axum::serve(listener, app(state)).await.map_err(|e| ServeError::Io(e.to_string()))
}

pub async fn bind(addr: SocketAddr) -> Result<TcpListener, ServeError> {
    TcpListener::bind(addr).await.map_err(|e| ServeError::Bind { addr: addr.to_string(), reason: e.to_string() })
}

/// Builds the live backends, health-checks them (warning only), binds and
/// serves.
pub async fn serve(config: ServiceConfig) -> Result<(), ServeError> {
    config.validate()?;
    let (small_cfg, large_cfg) = config.require_backends()?;
    let (small_cfg, large_cfg) = (small_cfg.clone(), large_cfg.clone());
    let (small, large) = tokio::task::spawn_blocking(move || -> Result<_, ServeError> {
        let small = OpenAiBackend::new(small_cfg).map_err(|e| ServeError::Backend(format!("small: {e}")))?;
        let large = OpenAiBackend::new(large_cfg).map_err(|e| ServeError::Backend(format!("large: {e}")))?;
        for (role, b) in [("small", &small), ("large", &large)] {
            if !b.healthy() {
                warn!("{role} backend {} is not reachable; continuing", b.name());
            }
        }
        Ok((small, large))
    })
    .await
    .map_err(|e| ServeError::Io(e.to_string()))??;
    let addr = config.listen_addr()?;
    let listener = bind(addr).await?;
    info!("listening on {}", listener.local_addr().map_err(|e| ServeError::Io(e.to_string()))?);
    serve_with(listener, AppState::new(config, Arc::new(small), Arc::new(large))).await
}
