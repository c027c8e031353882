//! The text-generation backend contract used by the router.
//!
//! A backend can probe one token together with its top-k distribution,
//! continue a reasoning step until a boundary, and write the final answer.
//! Model switching is done by re-sending the accumulated context; the serving
//! engine's prefix cache is expected to absorb most of the prefill.

pub mod openai;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmenter::{Boundary, Phase, SegmentEvent, SegmenterConfig, StepSegmenter};
use crate::uncertainty::{StepLogprobs, TokenDistribution, TokenStat, UncertaintyError};

pub use openai::{OpenAiBackend, OpenAiConfig};

/// Which side of the small/large pair produced something.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Small,
    Large,
}

impl Model {
    pub fn as_str(self) -> &'static str {
        match self {
            Model::Small => "small",
            Model::Large => "large",
        }
    }
}

impl std::fmt::Display for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { temperature: 0.6, top_p: 0.95 }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),

    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },

    #[error("backend response carries no logprobs; routing needs top-k logprobs")]
    MissingLogprobs,

    #[error("stream interrupted after {} tokens: {reason}", partial.len())]
    StreamInterrupted { partial: Vec<String>, reason: String },

    #[error("unexpected response: {0}")]
    Protocol(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("script error: {0}")]
    Script(String),

    #[error(transparent)]
    Distribution(#[from] UncertaintyError),
}

impl BackendError {
    /// Transport-level failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::StreamInterrupted { .. } => true,
            BackendError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Result of a one-token probe.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub token: String,
    pub dist: TokenDistribution,
    /// Logprob of the sampled token.
    pub logprob: f64,
}

/// A request to generate (the rest of) one reasoning step.
#[derive(Debug, Clone)]
pub struct StepRequest<'a> {
    pub context: &'a str,
    /// Probe token to continue from; the returned text starts with it.
    pub prefix: Option<&'a str>,
    pub segmenter: &'a SegmenterConfig,
    pub phase: Phase,
    /// Think-phase tokens still allowed, counting the prefix.
    pub max_new_tokens: usize,
    pub want_logprobs: bool,
    pub sampling: Sampling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub text: String,
    /// Tokens attributed to the step, prefix first.
    pub tokens: Vec<String>,
    pub boundary: Boundary,
    /// Per-token statistics of the generated tokens (not the prefix), when
    /// requested and available.
    pub logprobs: Option<StepLogprobs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerOutput {
    pub text: String,
    pub token_count: usize,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn probe_first(&self, context: &str, sampling: &Sampling) -> Result<Probe, BackendError>;

    fn generate_step(&self, request: &StepRequest<'_>) -> Result<StepOutput, BackendError>;

    fn generate_answer(
        &self,
        context: &str,
        max_new_tokens: usize,
        sampling: &Sampling,
    ) -> Result<AnswerOutput, BackendError>;

    fn healthy(&self) -> bool {
        true
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn probe_first(&self, context: &str, sampling: &Sampling) -> Result<Probe, BackendError> {
        (**self).probe_first(context, sampling)
    }
    fn generate_step(&self, request: &StepRequest<'_>) -> Result<StepOutput, BackendError> {
        (**self).generate_step(request)
    }
    fn generate_answer(
        &self,
        context: &str,
        max_new_tokens: usize,
        sampling: &Sampling,
    ) -> Result<AnswerOutput, BackendError> {
        (**self).generate_answer(context, max_new_tokens, sampling)
    }
    fn healthy(&self) -> bool {
        (**self).healthy()
    }
}

/// Feeds streamed tokens through a [`StepSegmenter`] and stops at the first
/// step boundary. Shared by every backend implementation so that step
/// extents are decided client-side, the same way everywhere.
#[derive(Debug)]
pub struct StepCollector {
    segmenter: StepSegmenter,
    tokens: Vec<String>,
    stats: Vec<TokenStat>,
    stats_complete: bool,
    want_logprobs: bool,
    done: Option<(String, Boundary)>,
}

impl StepCollector {
    pub fn new(request: &StepRequest<'_>) -> Self {
        let budget = request.max_new_tokens.max(1);
        let mut collector = Self {
            segmenter: StepSegmenter::new(request.segmenter.clone(), budget).in_phase(request.phase),
            tokens: Vec::new(),
            stats: Vec::new(),
            stats_complete: true,
            want_logprobs: request.want_logprobs,
            done: None,
        };
        if let Some(prefix) = request.prefix {
            collector.feed_token(prefix);
        }
        collector
    }

    pub fn is_done(&self) -> bool {
        self.done.is_some()
    }

    /// Partial tokens so far, for error reporting.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Pushes one generated token. Returns `true` once the step is complete;
    /// further tokens are ignored.
    pub fn push(&mut self, token: &str, stat: Option<TokenStat>) -> bool {
        if self.done.is_some() {
            return true;
        }
        if self.want_logprobs {
            match stat {
                Some(s) => self.stats.push(s),
                None => self.stats_complete = false,
            }
        }
        self.feed_token(token);
        self.done.is_some()
    }

    fn feed_token(&mut self, token: &str) {
        self.tokens.push(token.to_owned());
        for event in self.segmenter.feed(token) {
            if let SegmentEvent::StepComplete { text, boundary, .. } = event {
                if self.done.is_none() {
                    self.done = Some((text, boundary));
                }
            }
        }
    }

    /// Ends the stream. `fallback` names the boundary to report when the
    /// stream ended without the segmenter seeing one (server-side stop).
    pub fn finish(mut self, fallback: Boundary) -> StepOutput {
        let (text, boundary) = match self.done.take() {
            Some(done) => done,
            None => {
                let text = self
                    .segmenter
                    .flush()
                    .into_iter()
                    .find_map(|e| match e {
                        SegmentEvent::StepComplete { text, .. } => Some(text),
                        _ => None,
                    })
                    .unwrap_or_default();
                (text, fallback)
            }
        };
        let logprobs = if self.want_logprobs && self.stats_complete && !self.stats.is_empty() {
            StepLogprobs::new(self.stats).ok()
        } else {
            None
        };
        StepOutput { text, tokens: self.tokens, boundary, logprobs }
    }
}
