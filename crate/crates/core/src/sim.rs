//! Scripted backends and an integer-millisecond latency model.
//!
//! A [`Scenario`] scripts, for every reasoning step, the small model's
//! first-token distribution and the step bodies each model would write. The
//! [`ScriptedBackend`] serves those scripts through the ordinary [`Backend`]
//! contract, recovering the current step from the context it is given, so
//! the router runs unmodified against it.
//!
//! Latency is not measured but computed from the trace with
//! [`simulate_latency`]: per-token decode cost per model, a switch overhead
//! plus prefill of the context the target model has not seen yet, and an
//! optional speculative-decoding model for large-model generation.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, LazyLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{AnswerOutput, Backend, BackendError, Model, Probe, Sampling, StepOutput, StepRequest, StepCollector};
use crate::routing::RouterConfig;
use crate::segmenter::Boundary;
use crate::trace::{Action, Trace};
use crate::uncertainty::{distribution_with_entropy, initial_token_entropy, StepLogprobs, TokenDistribution, TokenStat};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("step index {index} out of range (scenario has {len} steps)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("malformed latency event {index}: {reason}")]
    MalformedEvent { index: usize, reason: String },

    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),

    #[error("cannot read scenario {path}: {reason}")]
    Io { path: String, reason: String },
}

static TOKEN_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[^\S\n]*[^\s]+|\n+|[^\S\n]+").expect("token regex"));

/// Splits text into pseudo-tokens: a word with its leading spaces, a run of
/// newlines, or trailing whitespace. Concatenating the pieces gives back the
/// input.
pub fn tokenize(text: &str) -> Vec<&str> {
    TOKEN_RE.find_iter(text).map(|m| m.as_str()).collect()
}

pub fn token_count(text: &str) -> usize {
    TOKEN_RE.find_iter(text).count()
}

/// One scripted reasoning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStep", into = "RawStep")]
pub struct StepScript {
    pub first_token_distribution: TokenDistribution,
    pub small_body: String,
    pub large_body: String,
    pub small_correct: bool,
    pub large_correct: bool,
    /// Per-token statistics of the small body; synthesized from the probe
    /// when absent.
    pub small_token_stats: Option<Vec<TokenStat>>,
    /// Free-form label, e.g. "routine" or "pivot".
    pub regime: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawStep {
    probe: Vec<(String, f64)>,
    small_body: String,
    large_body: String,
    #[serde(default = "yes")]
    small_correct: bool,
    #[serde(default = "yes")]
    large_correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    small_token_stats: Option<Vec<TokenStat>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    regime: Option<String>,
}

fn yes() -> bool {
    true
}

impl TryFrom<RawStep> for StepScript {
    type Error = String;

    fn try_from(raw: RawStep) -> Result<Self, String> {
        let dist = TokenDistribution::from_pairs(raw.probe).map_err(|e| e.to_string())?;
        Ok(Self {
            first_token_distribution: dist,
            small_body: raw.small_body,
            large_body: raw.large_body,
            small_correct: raw.small_correct,
            large_correct: raw.large_correct,
            small_token_stats: raw.small_token_stats,
            regime: raw.regime,
        })
    }
}

impl From<StepScript> for RawStep {
    fn from(s: StepScript) -> Self {
        Self {
            probe: s.first_token_distribution.entries().iter().map(|e| (e.token.clone(), e.prob)).collect(),
            small_body: s.small_body,
            large_body: s.large_body,
            small_correct: s.small_correct,
            large_correct: s.large_correct,
            small_token_stats: s.small_token_stats,
            regime: s.regime,
        }
    }
}

impl StepScript {
    pub fn h_init(&self) -> f64 {
        initial_token_entropy(&self.first_token_distribution)
    }

    pub fn body(&self, model: Model) -> &str {
        match model {
            Model::Small => &self.small_body,
            Model::Large => &self.large_body,
        }
    }

    fn correct(&self, model: Model) -> bool {
        match model {
            Model::Small => self.small_correct,
            Model::Large => self.large_correct,
        }
    }
}

/// Speculative decoding parameters for large-model generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecDecoding {
    pub draft_length: u32,
    pub acceptance_rate: f64,
}

impl SpecDecoding {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.draft_length < 1 {
            return Err(SimError::InvalidProfile("draft_length must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.acceptance_rate) {
            return Err(SimError::InvalidProfile(format!(
                "acceptance_rate {} outside [0, 1]",
                self.acceptance_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendProfile {
    pub small_decode_ms: u64,
    pub large_decode_ms: u64,
    pub prefill_ms_per_token: u64,
    pub switch_overhead_ms: u64,
    pub spec_decoding: Option<SpecDecoding>,
}

impl Default for BackendProfile {
    fn default() -> Self {
        Self {
            small_decode_ms: 10,
            large_decode_ms: 30,
            prefill_ms_per_token: 1,
            switch_overhead_ms: 5,
            spec_decoding: None,
        }
    }
}

impl BackendProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        match &self.spec_decoding {
            Some(spec) => spec.validate(),
            None => Ok(()),
        }
    }

    pub fn with_spec(mut self, draft_length: u32, acceptance_rate: f64) -> Self {
        self.spec_decoding = Some(SpecDecoding { draft_length, acceptance_rate });
        self
    }

    fn decode_ms(&self, model: Model) -> u64 {
        match model {
            Model::Small => self.small_decode_ms,
            Model::Large => self.large_decode_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub question: String,
    pub steps: Vec<StepScript>,
    /// Final answer text written when the reasoning is sound.
    pub answer: String,
    /// Expected boxed answer, for the accuracy proxy.
    pub answer_oracle: String,
    /// Answer text written when an uncorrected step error remains.
    #[serde(default = "default_wrong_answer")]
    pub wrong_answer: String,
    #[serde(default)]
    pub profile: BackendProfile,
}

fn default_wrong_answer() -> String {
    "\\boxed{?}".into()
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.steps.is_empty() {
            return Err(SimError::InvalidScenario("no steps".into()));
        }
        for (i, step) in self.steps.iter().enumerate() {
            let n = i + 1;
            if step.small_body.is_empty() || step.large_body.is_empty() {
                return Err(SimError::InvalidScenario(format!("step {n}: empty body")));
            }
            let mode = &step.first_token_distribution.mode().token;
            if !step.small_body.starts_with(mode.as_str()) {
                return Err(SimError::InvalidScenario(format!(
                    "step {n}: probe mode {mode:?} is not a prefix of small_body"
                )));
            }
            if let Some(stats) = &step.small_token_stats {
                let expected = token_count(&step.small_body);
                if stats.len() != expected {
                    return Err(SimError::InvalidScenario(format!(
                        "step {n}: {} token stats for {expected} tokens",
                        stats.len()
                    )));
                }
                StepLogprobs::new(stats.clone())
                    .map_err(|e| SimError::InvalidScenario(format!("step {n}: {e}")))?;
            }
        }
        self.profile.validate()
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let scenario: Scenario =
            serde_json::from_str(text).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            SimError::InvalidScenario(reason) => {
                SimError::InvalidScenario(format!("{}: {reason}", path.display()))
            }
            other => other,
        })
    }

    /// Number of steps whose scripted H_init exceeds `threshold`.
    pub fn steps_above(&self, threshold: f64) -> usize {
        self.steps.iter().filter(|s| s.h_init() > threshold).count()
    }
}

/// The deterministic sample for a step: the distribution's mode.
pub fn scripted_probe(scenario: &Scenario, step_index: usize) -> Result<(String, TokenDistribution), SimError> {
    let step = scenario
        .steps
        .get(step_index)
        .ok_or(SimError::IndexOutOfRange { index: step_index, len: scenario.steps.len() })?;
    let dist = step.first_token_distribution.clone();
    Ok((dist.mode().token.clone(), dist))
}

/// Where a context stands relative to the script.
struct Position {
    /// Index of the next step to write.
    next: usize,
    /// An error introduced by a small-model step and not yet corrected.
    error: bool,
    /// The context ends inside a step or carries unscripted text.
    partial: bool,
}

/// Serves a [`Scenario`] as one side of the model pair.
///
/// The backend is stateless with respect to routing: it finds the current
/// step by matching the context, after the rendered prompt, against the
/// scripted bodies of either model.
#[derive(Debug)]
pub struct ScriptedBackend {
    scenario: Arc<Scenario>,
    role: Model,
    prompt: String,
    name: String,
    calls: AtomicUsize,
    fail_after: Option<usize>,
}

impl ScriptedBackend {
    pub fn new(scenario: Arc<Scenario>, role: Model, prompt: impl Into<String>) -> Self {
        Self {
            name: format!("scripted-{role}"),
            scenario,
            role,
            prompt: prompt.into(),
            calls: AtomicUsize::new(0),
            fail_after: None,
        }
    }

    /// Small and large backends for `scenario` under `config`'s prompt
    /// template.
    pub fn pair(scenario: &Scenario, config: &RouterConfig) -> (Self, Self) {
        let scenario = Arc::new(scenario.clone());
        let prompt = config.render_prompt(&scenario.question);
        (
            Self::new(scenario.clone(), Model::Small, prompt.clone()),
            Self::new(scenario, Model::Large, prompt),
        )
    }

    /// Every call after the first `calls` successful ones fails.
    pub fn failing_after(mut self, calls: usize) -> Self {
        self.fail_after = Some(calls);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn tick(&self) -> Result<(), BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        match self.fail_after {
            Some(limit) if n >= limit => Err(BackendError::Transport(format!("{} unavailable", self.name))),
            _ => Ok(()),
        }
    }

    fn locate(&self, context: &str) -> Result<Position, BackendError> {
        let mut rest = context.strip_prefix(self.prompt.as_str()).ok_or_else(|| {
            BackendError::Script("context does not start with the scenario prompt".into())
        })?;
        let mut pos = Position { next: 0, error: false, partial: false };
        while !rest.is_empty() {
            let Some(step) = self.scenario.steps.get(pos.next) else {
                pos.partial = true;
                break;
            };
            let large = rest.starts_with(step.large_body.as_str());
            let small = rest.starts_with(step.small_body.as_str());
            let writer = match (small, large) {
                (true, true) if step.small_body.len() > step.large_body.len() => Model::Small,
                (_, true) => Model::Large,
                (true, false) => Model::Small,
                (false, false) => {
                    pos.partial = true;
                    break;
                }
            };
            rest = &rest[step.body(writer).len()..];
            match (writer, step.correct(writer)) {
                (_, false) => pos.error = true,
                (Model::Large, true) => pos.error = false,
                (Model::Small, true) => {}
            }
            pos.next += 1;
        }
        Ok(pos)
    }

    fn current_step(&self, context: &str) -> Result<(usize, &StepScript), BackendError> {
        let pos = self.locate(context)?;
        if pos.partial {
            return Err(BackendError::Script(format!(
                "context diverges from the script after step {}",
                pos.next
            )));
        }
        let step = self.scenario.steps.get(pos.next).ok_or_else(|| {
            BackendError::Script(format!("all {} scripted steps already written", self.scenario.steps.len()))
        })?;
        Ok((pos.next, step))
    }

    fn synthesized_stats(step: &StepScript, tokens: usize) -> Vec<TokenStat> {
        let mode = step.first_token_distribution.mode();
        let mut stats = vec![TokenStat { logprob: 0.0, entropy: 0.0 }; tokens];
        if let Some(first) = stats.first_mut() {
            *first = TokenStat { logprob: mode.prob.ln(), entropy: step.h_init() };
        }
        stats
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn probe_first(&self, context: &str, _sampling: &Sampling) -> Result<Probe, BackendError> {
        self.tick()?;
        let (index, _) = self.current_step(context)?;
        let (token, dist) = scripted_probe(&self.scenario, index).map_err(|e| BackendError::Script(e.to_string()))?;
        let logprob = dist.mode().prob.ln();
        Ok(Probe { token, dist, logprob })
    }

    fn generate_step(&self, request: &StepRequest<'_>) -> Result<StepOutput, BackendError> {
        self.tick()?;
        let (_, step) = self.current_step(request.context)?;
        let body = step.body(self.role);
        let rest = match request.prefix {
            Some(prefix) => body.strip_prefix(prefix).ok_or_else(|| {
                BackendError::Script(format!("prefix {prefix:?} does not start the {} body", self.role))
            })?,
            None => body,
        };
        let tokens = tokenize(rest);
        let stats = match (self.role, &step.small_token_stats) {
            (Model::Small, Some(stats)) => stats.clone(),
            (Model::Small, None) => Self::synthesized_stats(step, token_count(body)),
            (Model::Large, _) => vec![TokenStat { logprob: 0.0, entropy: 0.0 }; token_count(body)],
        };
        // stats are indexed over the whole body; skip the prefix token
        let offset = usize::from(request.prefix.is_some());
        let mut collector = StepCollector::new(request);
        for (i, token) in tokens.iter().enumerate() {
            let stat = stats.get(i + offset).copied();
            if collector.push(token, stat) {
                break;
            }
        }
        Ok(collector.finish(Boundary::Eos))
    }

    fn generate_answer(&self, context: &str, max_new_tokens: usize, _sampling: &Sampling) -> Result<AnswerOutput, BackendError> {
        self.tick()?;
        let pos = self.locate(context)?;
        let text = if pos.error { &self.scenario.wrong_answer } else { &self.scenario.answer };
        let mut tokens = tokenize(text);
        if max_new_tokens > 0 {
            tokens.truncate(max_new_tokens);
        }
        Ok(AnswerOutput { text: tokens.concat(), token_count: tokens.len() })
    }

    fn healthy(&self) -> bool {
        match self.fail_after {
            Some(limit) => self.calls() < limit,
            None => true,
        }
    }
}

/// Expected number of accepted draft tokens per verification cycle.
pub fn expected_accepted(draft_length: u32, acceptance_rate: f64) -> Result<f64, SimError> {
    SpecDecoding { draft_length, acceptance_rate }.validate()?;
    let n = draft_length as i32;
    if acceptance_rate >= 1.0 {
        return Ok(n as f64);
    }
    Ok((1.0 - acceptance_rate.powi(n + 1)) / (1.0 - acceptance_rate) - 1.0)
}

fn spec_decode_ms(tokens: usize, spec: &SpecDecoding, profile: &BackendProfile) -> Result<u64, SimError> {
    let e = expected_accepted(spec.draft_length, spec.acceptance_rate)?;
    let cycles = (tokens as f64 / (e + 1.0) - 1e-9).ceil().max(0.0) as u64;
    let cycle = spec.draft_length as u64 * profile.small_decode_ms + profile.large_decode_ms;
    Ok(cycles * cycle)
}

/// Decode time of a large-model generation of `tokens` tokens under the
/// profile's speculative decoding.
pub fn apply_spec_decoding(tokens: usize, profile: &BackendProfile) -> Result<u64, SimError> {
    let spec = profile
        .spec_decoding
        .as_ref()
        .ok_or_else(|| SimError::InvalidProfile("speculative decoding is not configured".into()))?;
    spec_decode_ms(tokens, spec, profile)
}

/// One model call in the latency model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    /// 0-based step; `None` for the final answer.
    pub step: Option<usize>,
    pub model: Model,
    pub tokens: usize,
    /// Whether the generated tokens join the shared context.
    pub kept: bool,
}

/// Turns a trace into the model calls it implies: the probe (one small
/// decode), a rejected candidate, the step itself, and the answer.
pub fn events_from_trace(trace: &Trace) -> Vec<SimEvent> {
    let mut events = Vec::new();
    for (i, (step, decision)) in trace.steps.iter().zip(&trace.decisions).enumerate() {
        let kept_probe = step.probed && decision.probe_kept;
        if step.probed {
            events.push(SimEvent { step: Some(i), model: Model::Small, tokens: 1, kept: kept_probe });
        }
        if step.discarded_tokens > 0 {
            events.push(SimEvent { step: Some(i), model: Model::Small, tokens: step.discarded_tokens, kept: false });
        }
        let body = step.token_count.saturating_sub(usize::from(kept_probe));
        if body > 0 {
            events.push(SimEvent { step: Some(i), model: step.generator, tokens: body, kept: true });
        }
    }
    if let Some(answer) = &trace.answer {
        if answer.token_count > 0 {
            events.push(SimEvent { step: None, model: answer.generator, tokens: answer.token_count, kept: true });
        }
    }
    events
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLatency {
    pub small_ms: u64,
    pub large_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub steps: Vec<StepLatency>,
    pub answer_ms: u64,
    pub switches: usize,
    pub total_ms: u64,
}

impl LatencyBreakdown {
    pub fn think_ms(&self) -> u64 {
        self.steps.iter().map(|s| s.small_ms + s.large_ms).sum()
    }
}

/// Latency of a sequence of model calls starting from a prompt of
/// `prompt_tokens` tokens.
///
/// Each call pays, in order: the switch overhead when it goes to a different
/// model than the previous call; prefill for every context token the model
/// has not processed yet (prefix-cache model); and decode time for its own
/// tokens, with speculative decoding applied to large-model calls when
/// configured. Switch and prefill costs are charged to the called model.
pub fn simulate_latency(prompt_tokens: usize, events: &[SimEvent], profile: &BackendProfile) -> Result<LatencyBreakdown, SimError> {
    profile.validate()?;
    let mut out = LatencyBreakdown::default();
    let mut context = prompt_tokens as u64;
    let mut cached = [0u64; 2];
    let mut last: Option<Model> = None;
    let mut last_step: Option<usize> = None;
    let mut answered = false;

    for (index, ev) in events.iter().enumerate() {
        let malformed = |reason: &str| SimError::MalformedEvent { index, reason: reason.into() };
        if ev.tokens == 0 {
            return Err(malformed("zero tokens"));
        }
        if answered {
            return Err(malformed("event after the final answer"));
        }
        match ev.step {
            Some(s) => {
                if last_step.is_some_and(|l| s < l) {
                    return Err(malformed("steps out of order"));
                }
                last_step = Some(s);
            }
            None => answered = true,
        }

        let slot = ev.model as usize;
        let mut cost = 0u64;
        if last.is_some_and(|m| m != ev.model) {
            cost += profile.switch_overhead_ms;
            out.switches += 1;
        }
        cost += profile.prefill_ms_per_token * (context - cached[slot]);
        cached[slot] = context;
        cost += match (ev.model, &profile.spec_decoding) {
            (Model::Large, Some(spec)) => spec_decode_ms(ev.tokens, spec, profile)?,
            (model, _) => profile.decode_ms(model) * ev.tokens as u64,
        };
        if ev.kept {
            context += ev.tokens as u64;
            cached[slot] = context;
        }
        last = Some(ev.model);

        match ev.step {
            Some(s) => {
                if out.steps.len() <= s {
                    out.steps.resize(s + 1, StepLatency::default());
                }
                match ev.model {
                    Model::Small => out.steps[s].small_ms += cost,
                    Model::Large => out.steps[s].large_ms += cost,
                }
            }
            None => out.answer_ms += cost,
        }
        out.total_ms += cost;
    }
    Ok(out)
}

/// Simulated latency of a routed trace.
pub fn simulate_trace(trace: &Trace, profile: &BackendProfile) -> Result<LatencyBreakdown, SimError> {
    let mut out = simulate_latency(token_count(&trace.prompt), &events_from_trace(trace), profile)?;
    out.steps.resize(trace.steps.len(), StepLatency::default());
    Ok(out)
}

/// Replaces the trace's wall-clock timings with simulated ones.
pub fn apply_simulated_latency(trace: &mut Trace, profile: &BackendProfile) -> Result<LatencyBreakdown, SimError> {
    let breakdown = simulate_trace(trace, profile)?;
    for (step, lat) in trace.steps.iter_mut().zip(&breakdown.steps) {
        step.small_ms = lat.small_ms as f64;
        step.large_ms = lat.large_ms as f64;
    }
    if let Some(answer) = trace.answer.as_mut() {
        answer.elapsed_ms = breakdown.answer_ms as f64;
    }
    trace.recompute_accounting();
    Ok(breakdown)
}

/// Mixture parameters for synthetic scenarios: a low-entropy routine
/// component and a high-entropy pivot component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BimodalParams {
    pub low_mean: f64,
    pub low_sd: f64,
    pub high_mean: f64,
    pub high_sd: f64,
    /// Probability that a step comes from the high component.
    pub high_weight: f64,
    /// Probability that the small model gets a high-component step wrong.
    pub high_error_prob: f64,
    /// Words per step body, excluding the delimiter.
    pub step_words: usize,
    /// Mean and spread of the per-step mean token entropy of small bodies.
    pub h_step_mean: f64,
    pub h_step_sd: f64,
    /// Size of the probe distributions.
    pub vocab: usize,
}

impl Default for BimodalParams {
    fn default() -> Self {
        Self {
            low_mean: 0.1,
            low_sd: 0.08,
            high_mean: 1.5,
            high_sd: 0.4,
            high_weight: 0.25,
            high_error_prob: 0.5,
            step_words: 24,
            h_step_mean: 0.6,
            h_step_sd: 0.12,
            vocab: 32,
        }
    }
}

impl BimodalParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidParams(m.into()));
        let finite = [self.low_mean, self.low_sd, self.high_mean, self.high_sd, self.h_step_mean, self.h_step_sd];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("parameters must be finite");
        }
        if self.low_sd <= 0.0 || self.high_sd <= 0.0 || self.h_step_sd <= 0.0 {
            return bad("spreads must be positive");
        }
        if self.low_mean < 0.0 || self.high_mean < self.low_mean || self.h_step_mean < 0.0 {
            return bad("means must satisfy 0 <= low_mean <= high_mean and h_step_mean >= 0");
        }
        if !(0.0..=1.0).contains(&self.high_weight) || !(0.0..=1.0).contains(&self.high_error_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.step_words < 1 {
            return bad("step_words must be >= 1");
        }
        if self.vocab < 2 {
            return bad("vocab must be >= 2");
        }
        let max_h = (self.vocab as f64).ln();
        if self.high_mean >= max_h {
            return bad("high_mean must be below ln(vocab)");
        }
        Ok(())
    }

    fn max_entropy(&self) -> f64 {
        (self.vocab as f64).ln() - 1e-3
    }
}

/// A normal draw truncated to `[lo, hi]` by rejection.
fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let normal = Normal::new(mean, sd).expect("validated spread");
    for _ in 0..1000 {
        let x = normal.sample(rng);
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
    mean.clamp(lo, hi)
}

const WORDS: [&str; 16] = [
    "sum", "digit", "term", "carry", "bound", "case", "count", "value", "index", "pair", "factor", "power", "check",
    "total", "step", "rule",
];

fn words(rng: &mut ChaCha8Rng, n: usize, tag: &str) -> String {
    (0..n)
        .map(|_| format!(" {tag}{}", WORDS[rng.random_range(0..WORDS.len())]))
        .collect()
}

/// Generates a scenario whose first-token entropies follow a two-component
/// mixture. Deterministic in `seed`.
///
/// Low-component steps are always right when written by the small model;
/// high-component steps are wrong with probability `high_error_prob`. The
/// large model is always right. Both bodies of a step have the same token
/// count and the small model's per-token statistics are drawn around
/// `h_step_mean`, independently of the component.
pub fn build_distribution_scenario(seed: u64, n_steps: usize, params: &BimodalParams) -> Result<Scenario, SimError> {
    params.validate()?;
    if n_steps == 0 {
        return Err(SimError::InvalidParams("n_steps must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_h = params.max_entropy();
    let mut steps = Vec::with_capacity(n_steps);
    for k in 1..=n_steps {
        let high = rng.random_bool(params.high_weight);
        let h = if high {
            truncated_normal(&mut rng, params.high_mean, params.high_sd, 0.0, max_h)
        } else {
            truncated_normal(&mut rng, params.low_mean, params.low_sd, 0.0, max_h)
        };
        let lead = format!("S{k}");
        let mut vocab = vec![lead.clone()];
        vocab.extend((1..params.vocab).map(|j| format!("alt{j}")));
        let dist = distribution_with_entropy(&vocab, h).map_err(|e| SimError::InvalidParams(e.to_string()))?;

        let last = k == n_steps;
        let tail = if last { "\n</think>" } else { "\n\n" };
        let small_body = format!("{lead}{}{tail}", words(&mut rng, params.step_words, "s"));
        let large_body = format!("{lead}{}{tail}", words(&mut rng, params.step_words, "l"));

        let n_tokens = token_count(&small_body);
        let h_step = truncated_normal(&mut rng, params.h_step_mean, params.h_step_sd, 0.0, f64::INFINITY);
        let h_first = initial_token_entropy(&dist);
        let rest = if n_tokens > 1 {
            ((n_tokens as f64 * h_step - h_first) / (n_tokens - 1) as f64).max(0.0)
        } else {
            0.0
        };
        let mut stats = vec![TokenStat { logprob: dist.mode().prob.ln(), entropy: h_first }];
        for _ in 1..n_tokens {
            let e = rest * rng.random_range(0.5..1.5);
            stats.push(TokenStat { logprob: -0.5 * e, entropy: e });
        }

        let small_correct = !high || !rng.random_bool(params.high_error_prob);
        steps.push(StepScript {
            first_token_distribution: dist,
            small_body,
            large_body,
            small_correct,
            large_correct: true,
            small_token_stats: Some(stats),
            regime: Some(if high { "pivot" } else { "routine" }.into()),
        });
    }
    let scenario = Scenario {
        question: format!("Synthetic problem {seed}: compute the total."),
        steps,
        answer: "The total is \\boxed{42}.".into(),
        answer_oracle: "42".into(),
        wrong_answer: default_wrong_answer(),
        profile: BackendProfile::default(),
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Intervention count the init-entropy policy would produce on `scenario`
/// with every step completed (no budget truncation).
pub fn scripted_interventions(scenario: &Scenario, threshold: f64) -> usize {
    scenario
        .steps
        .iter()
        .filter(|s| crate::routing::decide_init_entropy(s.h_init(), threshold) == Action::Intervene)
        .count()
}
