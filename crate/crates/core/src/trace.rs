//! In-memory record of one routed reasoning run.

use serde::{Deserialize, Serialize};

use crate::backend::Model;
use crate::segmenter::Boundary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// Probe one token with the small model, dispatch on its entropy.
    InitEntropy,
    /// Generate the step with the small model, regenerate with the large one
    /// when mean token entropy exceeds the threshold.
    StepEntropy,
    /// Same as `StepEntropy`, scored by step perplexity.
    StepPerplexity,
    /// Uniform integer score in 0..=9 compared against the threshold.
    RandomScore,
    AlwaysSmall,
    AlwaysLarge,
}

impl Policy {
    pub const ALL: [Policy; 6] = [
        Policy::InitEntropy,
        Policy::StepEntropy,
        Policy::StepPerplexity,
        Policy::RandomScore,
        Policy::AlwaysSmall,
        Policy::AlwaysLarge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::InitEntropy => "init-entropy",
            Policy::StepEntropy => "step-entropy",
            Policy::StepPerplexity => "step-perplexity",
            Policy::RandomScore => "random-score",
            Policy::AlwaysSmall => "always-small",
            Policy::AlwaysLarge => "always-large",
        }
    }

    pub fn uses_threshold(self) -> bool {
        !matches!(self, Policy::AlwaysSmall | Policy::AlwaysLarge)
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown policy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Delegate,
    Intervene,
}

impl Action {
    pub fn generator(self) -> Model {
        match self {
            Action::Delegate => Model::Small,
            Action::Intervene => Model::Large,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub h_init: Option<f64>,
    pub h_step: Option<f64>,
    pub ppl_step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub text: String,
    pub generator: Model,
    pub boundary: Boundary,
    pub token_count: usize,
    pub metrics: StepMetrics,
    /// Whether a one-token probe was issued for this step.
    pub probed: bool,
    /// Tokens generated and then thrown away (a rejected small-model
    /// candidate under the step-metric policies).
    pub discarded_tokens: usize,
    pub small_ms: f64,
    pub large_ms: f64,
}

impl ReasoningStep {
    pub fn latency_ms(&self) -> f64 {
        self.small_ms + self.large_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// 1-based.
    pub step_index: usize,
    pub policy: Policy,
    pub h_init_nats: Option<f64>,
    /// The value compared against the threshold, when the policy uses one.
    pub score: Option<f64>,
    pub threshold_nats: f64,
    pub action: Action,
    pub probe_kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub text: String,
    pub generator: Model,
    pub token_count: usize,
    pub elapsed_ms: f64,
    /// The think-close marker was appended by the router because the think
    /// phase ended without it (budget or end of stream).
    pub closed_by_router: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub small_tokens: usize,
    pub large_tokens: usize,
    pub discarded_tokens: usize,
    pub probe_count: usize,
    pub answer_tokens: usize,
    pub small_ms: f64,
    pub large_ms: f64,
    pub answer_ms: f64,
    pub intervention_rate: f64,
}

impl Accounting {
    pub fn think_ms(&self) -> f64 {
        self.small_ms + self.large_ms
    }

    pub fn total_ms(&self) -> f64 {
        self.think_ms() + self.answer_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub question: String,
    /// The rendered prompt the steps were appended to.
    pub prompt: String,
    pub policy: Policy,
    pub threshold: f64,
    pub steps: Vec<ReasoningStep>,
    pub decisions: Vec<RoutingDecision>,
    pub answer: Option<FinalAnswer>,
    pub accounting: Accounting,
    pub failure: Option<String>,
}

impl Trace {
    pub fn new(question: &str, prompt: String, policy: Policy, threshold: f64) -> Self {
        Self {
            question: question.to_owned(),
            prompt,
            policy,
            threshold,
            steps: Vec::new(),
            decisions: Vec::new(),
            answer: None,
            accounting: Accounting::default(),
            failure: None,
        }
    }

    pub fn think_text(&self) -> String {
        self.steps.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn think_tokens(&self) -> usize {
        self.steps.iter().map(|s| s.token_count).sum()
    }

    pub fn final_answer(&self) -> &str {
        self.answer.as_ref().map(|a| a.text.as_str()).unwrap_or("")
    }

    pub fn interventions(&self) -> usize {
        self.decisions.iter().filter(|d| d.action == Action::Intervene).count()
    }

    /// Recomputes [`Accounting`] from the steps and answer.
    pub fn recompute_accounting(&mut self) {
        let mut acc = Accounting::default();
        for step in &self.steps {
            match step.generator {
                Model::Small => acc.small_tokens += step.token_count,
                Model::Large => acc.large_tokens += step.token_count,
            }
            acc.discarded_tokens += step.discarded_tokens;
            acc.probe_count += usize::from(step.probed);
            acc.small_ms += step.small_ms;
            acc.large_ms += step.large_ms;
        }
        if let Some(answer) = &self.answer {
            acc.answer_tokens = answer.token_count;
            acc.answer_ms = answer.elapsed_ms;
        }
        acc.intervention_rate = if self.decisions.is_empty() {
            0.0
        } else {
            self.interventions() as f64 / self.decisions.len() as f64
        };
        self.accounting = acc;
    }
}

/// Extracts the content of the last `\boxed{...}` in `text`, honouring nested
/// braces.
pub fn boxed_answer(text: &str) -> Option<&str> {
    let start = text.rfind("\\boxed{")? + "\\boxed{".len();
    let mut depth = 1usize;
    for (i, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Exact match on the boxed answer. `expected` may be given bare or boxed.
pub fn answer_matches(answer: &str, expected: &str) -> bool {
    let want = boxed_answer(expected).unwrap_or(expected).trim();
    match boxed_answer(answer) {
        Some(got) => got.trim() == want,
        None => false,
    }
}
