//! Step-wise probe-then-dispatch routing between a small and a large model.
//!
//! For every reasoning step the small model generates a single token; the
//! entropy of that token's distribution decides who writes the step. At or
//! below the threshold the small model keeps the probe token and finishes the
//! step (delegate). Above it the probe is thrown away and the large model
//! writes the step from the same context (intervene). The final answer is
//! always written by the large model.
//!
//! The step-metric policies are the generate-then-measure baselines: the
//! small model writes the whole step first and the large model regenerates it
//! when the step's mean entropy or perplexity is too high.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use crate::backend::{Backend, BackendError, Model, Sampling, StepOutput, StepRequest};
use crate::segmenter::{Boundary, Phase, SegmenterConfig, DEFAULT_BUDGET};
use crate::trace::{answer_matches, Action, FinalAnswer, Policy, ReasoningStep, RoutingDecision, StepMetrics, Trace};
use crate::uncertainty::{initial_token_entropy, step_entropy, step_perplexity};

/// Threshold sweep used for sensitivity tables.
pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.01, 0.1, 0.6, 0.9, 1.8];

pub const DEFAULT_PROMPT_TEMPLATE: &str = "{question}\n<think>\n";

fn default_policy() -> Policy {
    Policy::InitEntropy
}
fn default_threshold() -> f64 {
    0.9
}
fn default_budget() -> usize {
    DEFAULT_BUDGET
}
fn default_template() -> String {
    DEFAULT_PROMPT_TEMPLATE.to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    #[serde(default = "default_policy")]
    pub policy: Policy,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_budget")]
    pub budget_tokens: usize,
    #[serde(default)]
    pub sampling: Sampling,
    /// Answer token cap; 0 leaves it to the backend.
    #[serde(default)]
    pub answer_max_tokens: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            policy: Policy::InitEntropy,
            threshold: default_threshold(),
            rng_seed: 0,
            budget_tokens: DEFAULT_BUDGET,
            sampling: Sampling::default(),
            answer_max_tokens: 0,
        }
    }
}

impl PolicyConfig {
    pub fn with_policy(policy: Policy, threshold: f64) -> Self {
        Self { policy, threshold, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.threshold.is_finite() {
            return Err(format!("threshold must be finite, got {}", self.threshold));
        }
        if self.budget_tokens < 1 {
            return Err("budget_tokens must be >= 1".into());
        }
        if self.sampling.temperature.is_nan() || self.sampling.temperature < 0.0 || !(self.sampling.top_p > 0.0 && self.sampling.top_p <= 1.0) {
            return Err("sampling parameters out of range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    #[serde(flatten)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub segmenter: SegmenterConfig,
    /// `{question}` is replaced by the question text.
    #[serde(default = "default_template")]
    pub prompt_template: String,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            policy: PolicyConfig::default(),
            segmenter: SegmenterConfig::default(),
            prompt_template: default_template(),
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.policy.validate()?;
        self.segmenter.validate()?;
        if !self.prompt_template.contains("{question}") {
            return Err("prompt_template must contain {question}".into());
        }
        Ok(())
    }

    pub fn render_prompt(&self, question: &str) -> String {
        self.prompt_template.replace("{question}", question)
    }
}

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("invalid routing configuration: {0}")]
    Config(String),

    #[error("backend failure on the {model} model: {source}")]
    Backend {
        model: Model,
        #[source]
        source: BackendError,
        /// Everything routed before the failure.
        partial: Box<Trace>,
    },
}

impl RouteError {
    pub fn partial_trace(&self) -> Option<&Trace> {
        match self {
            RouteError::Backend { partial, .. } => Some(partial),
            RouteError::Config(_) => None,
        }
    }
}

/// Strict comparison: a tie delegates.
pub fn decide_init_entropy(h_init: f64, threshold: f64) -> Action {
    if h_init > threshold {
        Action::Intervene
    } else {
        Action::Delegate
    }
}

/// The output of [`Router::run_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub step: ReasoningStep,
    pub decision: RoutingDecision,
}

struct Failure {
    model: Model,
    source: BackendError,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64() * 1e3)
}

pub struct Router<'a> {
    small: &'a dyn Backend,
    large: &'a dyn Backend,
    config: &'a RouterConfig,
}

impl<'a> Router<'a> {
    pub fn new(small: &'a dyn Backend, large: &'a dyn Backend, config: &'a RouterConfig) -> Result<Self, RouteError> {
        config.validate().map_err(RouteError::Config)?;
        Ok(Self { small, large, config })
    }

    pub fn config(&self) -> &RouterConfig {
        self.config
    }

    fn phase_for(&self, context: &str) -> Phase {
        if context.contains(self.config.segmenter.think_open.as_str()) {
            Phase::Thinking
        } else {
            Phase::PreThink
        }
    }

    fn request<'r>(&'r self, context: &'r str, prefix: Option<&'r str>, budget_left: usize, want_logprobs: bool) -> StepRequest<'r> {
        StepRequest {
            context,
            prefix,
            segmenter: &self.config.segmenter,
            phase: self.phase_for(context),
            max_new_tokens: budget_left,
            want_logprobs,
            sampling: self.config.policy.sampling,
        }
    }

    fn generate(&self, model: Model, req: &StepRequest<'_>) -> (Result<StepOutput, Failure>, f64) {
        let backend = match model {
            Model::Small => self.small,
            Model::Large => self.large,
        };
        let (res, ms) = timed(|| backend.generate_step(req));
        (res.map_err(|source| Failure { model, source }), ms)
    }

    /// Routes and generates one step given the context `c_k` (prompt plus all
    /// previous steps).
    pub fn run_step(
        &self,
        step_index: usize,
        context: &str,
        budget_left: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepResult, (Model, BackendError)> {
        self.run_step_inner(step_index, context, budget_left, rng)
            .map_err(|f| (f.model, f.source))
    }

    fn run_step_inner(&self, step_index: usize, context: &str, budget_left: usize, rng: &mut ChaCha8Rng) -> Result<StepResult, Failure> {
        let pc = &self.config.policy;
        let threshold = pc.threshold;
        let mut small_ms = 0.0;
        let mut large_ms = 0.0;
        let mut metrics = StepMetrics::default();
        let mut probed = false;
        let mut discarded = 0;
        let mut score = None;

        let (action, output) = match pc.policy {
            Policy::InitEntropy => {
                let (probe, ms) = timed(|| self.small.probe_first(context, &pc.sampling));
                small_ms += ms;
                let probe = probe.map_err(|source| Failure { model: Model::Small, source })?;
                probed = true;
                let h = initial_token_entropy(&probe.dist);
                metrics.h_init = Some(h);
                score = Some(h);
                let action = decide_init_entropy(h, threshold);
                debug!(step = step_index, h_init = h, ?action, "probe");
                let output = match action {
                    Action::Delegate => {
                        let req = self.request(context, Some(&probe.token), budget_left, false);
                        let (out, ms) = self.generate(Model::Small, &req);
                        small_ms += ms;
                        out?
                    }
                    Action::Intervene => {
                        let req = self.request(context, None, budget_left, false);
                        let (out, ms) = self.generate(Model::Large, &req);
                        large_ms += ms;
                        out?
                    }
                };
                (action, output)
            }
            Policy::StepEntropy | Policy::StepPerplexity => {
                let req = self.request(context, None, budget_left, true);
                let (candidate, ms) = self.generate(Model::Small, &req);
                small_ms += ms;
                let candidate = candidate?;
                let stats = candidate.logprobs.as_ref().ok_or(Failure {
                    model: Model::Small,
                    source: BackendError::MissingLogprobs,
                })?;
                let to_failure = |e| Failure { model: Model::Small, source: BackendError::Distribution(e) };
                let h_step = step_entropy(stats).map_err(to_failure)?;
                let ppl = step_perplexity(stats).map_err(to_failure)?;
                metrics.h_step = Some(h_step);
                metrics.ppl_step = Some(ppl);
                let value = if pc.policy == Policy::StepEntropy { h_step } else { ppl };
                score = Some(value);
                if value > threshold {
                    discarded = candidate.tokens.len();
                    let req = self.request(context, None, budget_left, false);
                    let (out, ms) = self.generate(Model::Large, &req);
                    large_ms += ms;
                    (Action::Intervene, out?)
                } else {
                    (Action::Delegate, candidate)
                }
            }
            Policy::RandomScore => {
                let draw: u32 = rng.random_range(0..=9);
                score = Some(draw as f64);
                let action = if draw as f64 > threshold { Action::Intervene } else { Action::Delegate };
                let req = self.request(context, None, budget_left, false);
                let (out, ms) = self.generate(action.generator(), &req);
                match action.generator() {
                    Model::Small => small_ms += ms,
                    Model::Large => large_ms += ms,
                }
                (action, out?)
            }
            Policy::AlwaysSmall | Policy::AlwaysLarge => {
                let action = if pc.policy == Policy::AlwaysSmall { Action::Delegate } else { Action::Intervene };
                let req = self.request(context, None, budget_left, false);
                let (out, ms) = self.generate(action.generator(), &req);
                match action.generator() {
                    Model::Small => small_ms += ms,
                    Model::Large => large_ms += ms,
                }
                (action, out?)
            }
        };

        let step = ReasoningStep {
            token_count: output.tokens.len(),
            text: output.text,
            generator: action.generator(),
            boundary: output.boundary,
            metrics,
            probed,
            discarded_tokens: discarded,
            small_ms,
            large_ms,
        };
        let decision = RoutingDecision {
            step_index,
            policy: pc.policy,
            h_init_nats: metrics.h_init,
            score,
            threshold_nats: threshold,
            action,
            probe_kept: probed && action == Action::Delegate,
        };
        Ok(StepResult { step, decision })
    }

    /// Routes a whole question: steps until the think phase closes, the
    /// stream ends or the budget runs out, then the large model answers.
    pub fn run_trace(&self, question: &str) -> Result<Trace, RouteError> {
        let pc = &self.config.policy;
        let prompt = self.config.render_prompt(question);
        let mut trace = Trace::new(question, prompt.clone(), pc.policy, pc.threshold);
        let mut rng = ChaCha8Rng::seed_from_u64(pc.rng_seed);
        let mut context = prompt;
        let mut used = 0usize;
        let mut closed = false;

        loop {
            let budget_left = pc.budget_tokens.saturating_sub(used);
            if budget_left == 0 {
                break;
            }
            let index = trace.steps.len() + 1;
            let result = match self.run_step_inner(index, &context, budget_left, &mut rng) {
                Ok(r) => r,
                Err(f) => return Err(self.fail(trace, f)),
            };
            used += result.step.token_count;
            context.push_str(&result.step.text);
            let boundary = result.step.boundary;
            trace.steps.push(result.step);
            trace.decisions.push(result.decision);
            match boundary {
                Boundary::Delimiter => {}
                Boundary::ThinkClosed => {
                    closed = true;
                    break;
                }
                Boundary::Eos | Boundary::Budget => break,
            }
        }

        if !closed {
            context.push_str(&self.config.segmenter.think_close);
        }
        let (answer, ms) = timed(|| self.large.generate_answer(&context, pc.answer_max_tokens, &pc.sampling));
        let answer = match answer {
            Ok(a) => a,
            Err(source) => return Err(self.fail(trace, Failure { model: Model::Large, source })),
        };
        trace.answer = Some(FinalAnswer {
            text: answer.text,
            generator: Model::Large,
            token_count: answer.token_count,
            elapsed_ms: ms,
            closed_by_router: !closed,
        });
        trace.recompute_accounting();
        Ok(trace)
    }

    fn fail(&self, mut trace: Trace, failure: Failure) -> RouteError {
        trace.failure = Some(format!("{} model: {}", failure.model, failure.source));
        trace.recompute_accounting();
        RouteError::Backend { model: failure.model, source: failure.source, partial: Box::new(trace) }
    }
}

/// One question in a sweep, with its backends.
pub struct SweepCase<'a> {
    pub question: String,
    pub small: &'a dyn Backend,
    pub large: &'a dyn Backend,
    /// Expected answer for the exact-match accuracy proxy.
    pub expected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub policy: Policy,
    pub threshold: f64,
    pub mean_latency_ms: f64,
    /// Pooled over all steps of all completed traces.
    pub intervention_rate: f64,
    pub accuracy: Option<f64>,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub config: PolicyConfig,
    pub traces: Vec<Trace>,
    pub errors: Vec<(usize, String)>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
}

pub fn row_label(pc: &PolicyConfig) -> String {
    match pc.policy {
        Policy::InitEntropy => format!("tau={}", pc.threshold),
        p if p.uses_threshold() => format!("{p}@{}", pc.threshold),
        p => p.to_string(),
    }
}

/// Runs every case under every policy configuration. `latency_ms` maps a
/// case index and its trace to the latency reported for it (wall-clock from
/// the trace accounting, or a simulated figure). Failed cells are recorded
/// and the sweep carries on.
pub fn sweep_configs(
    cases: &[SweepCase<'_>],
    configs: &[PolicyConfig],
    base: &RouterConfig,
    latency_ms: &dyn Fn(usize, &Trace) -> f64,
) -> Result<SweepReport, RouteError> {
    if configs.is_empty() {
        return Err(RouteError::Config("no sweep configurations".into()));
    }
    let mut report = SweepReport::default();
    for pc in configs {
        let config = RouterConfig { policy: pc.clone(), ..base.clone() };
        config.validate().map_err(RouteError::Config)?;
        let mut cell = SweepCell { config: pc.clone(), traces: Vec::new(), errors: Vec::new() };
        let mut latency_sum = 0.0;
        let mut steps = 0usize;
        let mut interventions = 0usize;
        let mut judged = 0usize;
        let mut correct = 0usize;
        for (i, case) in cases.iter().enumerate() {
            let router = Router::new(case.small, case.large, &config)?;
            match router.run_trace(&case.question) {
                Ok(trace) => {
                    latency_sum += latency_ms(i, &trace);
                    steps += trace.decisions.len();
                    interventions += trace.interventions();
                    if let Some(expected) = &case.expected {
                        judged += 1;
                        correct += usize::from(answer_matches(trace.final_answer(), expected));
                    }
                    cell.traces.push(trace);
                }
                Err(e) => cell.errors.push((i, e.to_string())),
            }
        }
        if !cases.is_empty() {
            let completed = cell.traces.len();
            report.rows.push(SweepRow {
                label: row_label(pc),
                policy: pc.policy,
                threshold: pc.threshold,
                mean_latency_ms: if completed > 0 { latency_sum / completed as f64 } else { f64::NAN },
                intervention_rate: if steps > 0 { interventions as f64 / steps as f64 } else { 0.0 },
                accuracy: (judged > 0).then(|| correct as f64 / judged as f64),
                completed,
                failed: cell.errors.len(),
            });
        }
        report.cells.push(cell);
    }
    Ok(report)
}

/// Threshold sweep of the configured policy.
pub fn sweep(
    cases: &[SweepCase<'_>],
    thresholds: &[f64],
    base: &RouterConfig,
    latency_ms: &dyn Fn(usize, &Trace) -> f64,
) -> Result<SweepReport, RouteError> {
    if thresholds.is_empty() {
        return Err(RouteError::Config("threshold list is empty".into()));
    }
    let configs: Vec<PolicyConfig> = thresholds
        .iter()
        .map(|&threshold| PolicyConfig { threshold, ..base.policy.clone() })
        .collect();
    sweep_configs(cases, &configs, base, latency_ms)
}

/// Wall-clock latency recorded in the trace.
pub fn wall_latency(_case: usize, trace: &Trace) -> f64 {
    trace.accounting.total_ms()
}
