//! Client for OpenAI-compatible `/v1/completions` endpoints (vLLM, SGLang,
//! llama.cpp server, ...).
//!
//! The raw completions API is used rather than chat so that a partially
//! written assistant turn can be continued verbatim; callers render the chat
//! template into the prompt themselves.

use std::io::{BufRead, BufReader};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tracing::{debug, warn};

use super::{AnswerOutput, Backend, BackendError, Probe, Sampling, StepCollector, StepOutput, StepRequest};
use crate::segmenter::Boundary;
use crate::uncertainty::{normalize_probe, shannon_entropy, TokenStat, TruncationPolicy};

fn default_k() -> usize {
    20
}
fn default_timeout_ms() -> u64 {
    120_000
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}
fn default_true() -> bool {
    true
}
fn default_answer_tokens() -> usize {
    2048
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenAiConfig {
    /// Base URL, e.g. `http://localhost:8000` or `http://host/v1`.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_k")]
    pub top_logprobs_k: usize,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Also send the delimiter and think-close marker as server-side stop
    /// strings. The client-side segmenter decides step extents either way.
    #[serde(default = "default_true")]
    pub server_stop: bool,
    #[serde(default = "default_answer_tokens")]
    pub answer_max_tokens: usize,
    #[serde(default)]
    pub truncation: TruncationPolicy,
    /// Extra request fields passed through verbatim (engine-specific options
    /// such as speculative-decoding switches).
    #[serde(default)]
    pub extra: Map<String, Value>,
}

impl OpenAiConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            top_logprobs_k: default_k(),
            api_key_env: None,
            timeout_ms: default_timeout_ms(),
            max_attempts: default_attempts(),
            backoff_ms: default_backoff_ms(),
            server_stop: true,
            answer_max_tokens: default_answer_tokens(),
            truncation: TruncationPolicy::default(),
            extra: Map::new(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.endpoint.trim().is_empty() {
            return Err("endpoint must not be empty".into());
        }
        if self.model.trim().is_empty() {
            return Err("model must not be empty".into());
        }
        if self.top_logprobs_k < 1 {
            return Err("top_logprobs_k must be >= 1".into());
        }
        if self.timeout_ms == 0 {
            return Err("timeout_ms must be > 0".into());
        }
        if self.max_attempts == 0 {
            return Err("max_attempts must be >= 1".into());
        }
        Ok(())
    }

    fn base_url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/v1") {
            base.to_owned()
        } else {
            format!("{base}/v1")
        }
    }
}

/// Immutable after construction; share it behind an `Arc`.
#[derive(Debug)]
pub struct OpenAiBackend {
    config: OpenAiConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    label: String,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    logprobs: Option<Logprobs>,
    #[serde(default)]
    finish_reason: Option<String>,
    /// vLLM extension: the stop string (or token id) that ended generation.
    #[serde(default)]
    stop_reason: Option<Value>,
}

#[derive(Debug, Default, Deserialize)]
struct Logprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Vec<Option<Map<String, Value>>>,
}

fn top_list(map: &Map<String, Value>) -> Vec<(String, f64)> {
    map.iter()
        .filter_map(|(tok, lp)| lp.as_f64().map(|lp| (tok.clone(), lp)))
        .collect()
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self, BackendError> {
        config.validate().map_err(BackendError::InvalidRequest)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let api_key = config.api_key_env.as_ref().and_then(|var| std::env::var(var).ok());
        let label = format!("{}@{}", config.model, config.endpoint);
        Ok(Self { config, client, api_key, label })
    }

    pub fn config(&self) -> &OpenAiConfig {
        &self.config
    }

    fn body(&self, prompt: &str, max_tokens: usize, sampling: &Sampling, logprobs: bool, stream: bool) -> Value {
        let mut body = Map::new();
        for (k, v) in &self.config.extra {
            body.insert(k.clone(), v.clone());
        }
        body.insert("model".into(), json!(self.config.model));
        body.insert("prompt".into(), json!(prompt));
        body.insert("max_tokens".into(), json!(max_tokens));
        body.insert("temperature".into(), json!(sampling.temperature));
        body.insert("top_p".into(), json!(sampling.top_p));
        body.insert("stream".into(), json!(stream));
        if logprobs {
            body.insert("logprobs".into(), json!(self.config.top_logprobs_k));
        }
        Value::Object(body)
    }

    fn post(&self, body: &Value) -> Result<reqwest::blocking::Response, BackendError> {
        let url = format!("{}/completions", self.config.base_url());
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(BackendError::Http { status: status.as_u16(), body });
        }
        Ok(resp)
    }

    fn with_retry<T>(&self, what: &str, mut call: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.config.max_attempts => {
                    let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(10));
                    warn!(backend = %self.label, %what, attempt, error = %e, "retrying");
                    std::thread::sleep(Duration::from_millis(wait));
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn complete(&self, body: &Value) -> Result<Choice, BackendError> {
        let resp = self.post(body)?;
        let parsed: CompletionResponse = resp.json().map_err(|e| BackendError::Protocol(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("response has no choices".into()))
    }

    fn stream_step(&self, request: &StepRequest<'_>) -> Result<StepOutput, BackendError> {
        let mut prompt = request.context.to_owned();
        if let Some(prefix) = request.prefix {
            prompt.push_str(prefix);
        }
        let used = usize::from(request.prefix.is_some());
        let max_tokens = request.max_new_tokens.saturating_sub(used).max(1);
        let mut body = self.body(&prompt, max_tokens, &request.sampling, request.want_logprobs, true);
        if self.config.server_stop {
            body["stop"] = json!([request.segmenter.delimiter, request.segmenter.think_close]);
            body["include_stop_str_in_output"] = json!(true);
        }

        let mut collector = StepCollector::new(request);
        if collector.is_done() {
            return Ok(collector.finish(Boundary::Eos));
        }
        let resp = self.post(&body)?;
        let reader = BufReader::new(resp);
        let mut finish: Option<(String, Option<Value>)> = None;

        for line in reader.lines() {
            let line = line.map_err(|e| BackendError::StreamInterrupted {
                partial: collector.tokens().to_vec(),
                reason: e.to_string(),
            })?;
            let Some(data) = line.strip_prefix("data:") else { continue };
            let data = data.trim();
            if data == "[DONE]" {
                break;
            }
            if data.is_empty() {
                continue;
            }
            let chunk: CompletionResponse = serde_json::from_str(data)
                .map_err(|e| BackendError::Protocol(format!("bad stream chunk: {e}")))?;
            let Some(choice) = chunk.choices.into_iter().next() else { continue };
            if self.feed_chunk(&mut collector, &choice, request.want_logprobs)? {
                break;
            }
            if let Some(reason) = choice.finish_reason {
                finish = Some((reason, choice.stop_reason));
                break;
            }
        }

        if collector.is_done() {
            return Ok(collector.finish(Boundary::Eos));
        }
        let fallback = match finish {
            Some((reason, stop)) if reason == "stop" => {
                // Some servers strip the matched stop string; restore it so
                // the step keeps its delimiter.
                match stop.as_ref().and_then(Value::as_str) {
                    Some(s) if s == request.segmenter.delimiter || s == request.segmenter.think_close => {
                        if collector.push(s, None) {
                            return Ok(collector.finish(Boundary::Eos));
                        }
                        if s == request.segmenter.think_close {
                            Boundary::ThinkClosed
                        } else {
                            Boundary::Delimiter
                        }
                    }
                    _ => Boundary::Eos,
                }
            }
            Some((reason, _)) if reason == "length" => Boundary::Budget,
            Some(_) => Boundary::Eos,
            None => {
                return Err(BackendError::StreamInterrupted {
                    partial: collector.tokens().to_vec(),
                    reason: "stream ended without a finish reason".into(),
                })
            }
        };
        Ok(collector.finish(fallback))
    }

    /// Returns `true` once the collector has a complete step.
    fn feed_chunk(&self, collector: &mut StepCollector, choice: &Choice, want_logprobs: bool) -> Result<bool, BackendError> {
        let lp = choice.logprobs.as_ref();
        let per_token = lp.filter(|lp| !lp.tokens.is_empty() && lp.tokens.concat() == choice.text);
        match per_token {
            Some(lp) => {
                for (i, tok) in lp.tokens.iter().enumerate() {
                    let stat = if want_logprobs { self.token_stat(lp, i)? } else { None };
                    if collector.push(tok, stat) {
                        return Ok(true);
                    }
                }
                Ok(false)
            }
            None if choice.text.is_empty() => Ok(false),
            None => Ok(collector.push(&choice.text, None)),
        }
    }

    fn token_stat(&self, lp: &Logprobs, i: usize) -> Result<Option<TokenStat>, BackendError> {
        let (Some(Some(logprob)), Some(Some(top))) = (lp.token_logprobs.get(i), lp.top_logprobs.get(i)) else {
            return Ok(None);
        };
        let top = top_list(top);
        if top.is_empty() {
            return Ok(None);
        }
        let dist = normalize_probe(&top, self.config.truncation)?;
        Ok(Some(TokenStat { logprob: logprob.min(0.0), entropy: shannon_entropy(&dist) }))
    }
}

impl Backend for OpenAiBackend {
    fn name(&self) -> &str {
        &self.label
    }

    fn probe_first(&self, context: &str, sampling: &Sampling) -> Result<Probe, BackendError> {
        if context.is_empty() {
            return Err(BackendError::InvalidRequest("probe context is empty".into()));
        }
        let body = self.body(context, 1, sampling, true, false);
        let choice = self.with_retry("probe", || self.complete(&body))?;
        let lp = choice.logprobs.ok_or(BackendError::MissingLogprobs)?;
        let top = lp.top_logprobs.first().cloned().flatten().ok_or(BackendError::MissingLogprobs)?;
        let top = top_list(&top);
        if top.is_empty() {
            return Err(BackendError::MissingLogprobs);
        }
        let dist = normalize_probe(&top, self.config.truncation)?;
        let token = lp.tokens.first().cloned().unwrap_or(choice.text);
        let logprob = lp
            .token_logprobs
            .first()
            .copied()
            .flatten()
            .or_else(|| top.iter().find(|(t, _)| *t == token).map(|(_, lp)| *lp))
            .unwrap_or_else(|| dist.mode().prob.ln())
            .min(0.0);
        debug!(backend = %self.label, token = %token, k = dist.k(), "probe");
        Ok(Probe { token, dist, logprob })
    }

    fn generate_step(&self, request: &StepRequest<'_>) -> Result<StepOutput, BackendError> {
        if request.max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be >= 1".into()));
        }
        self.with_retry("step", || self.stream_step(request))
    }

    fn generate_answer(&self, context: &str, max_new_tokens: usize, sampling: &Sampling) -> Result<AnswerOutput, BackendError> {
        let max = if max_new_tokens == 0 { self.config.answer_max_tokens } else { max_new_tokens };
        let body = self.body(context, max, sampling, false, false);
        let choice = self.with_retry("answer", || self.complete(&body))?;
        let token_count = choice
            .logprobs
            .as_ref()
            .map(|lp| lp.tokens.len())
            .filter(|n| *n > 0)
            .unwrap_or_else(|| choice.text.split_whitespace().count());
        Ok(AnswerOutput { text: choice.text, token_count })
    }

    fn healthy(&self) -> bool {
        let url = format!("{}/models", self.config.base_url());
        let mut req = self.client.get(url).timeout(Duration::from_secs(5));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        req.send().map(|r| r.status().is_success()).unwrap_or(false)
    }
}
