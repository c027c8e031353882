//! Command-line workflows: run, sweep, simulate, analyze, serve.
//!
//! Flags mirror the service config keys; a `--config` file is loaded first
//! and flags override it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use steproute_core::analysis::{bimodality_coefficient, histogram, metric_samples, sweep_table, MetricName};
use steproute_core::backend::openai::OpenAiConfig;
use steproute_core::backend::{Model, OpenAiBackend};
use steproute_core::record::read_jsonl;
use steproute_core::routing::{sweep, wall_latency, Router, RouteError, SweepCase, DEFAULT_THRESHOLDS};
use steproute_core::sim::{apply_simulated_latency, simulate_trace, LatencyBreakdown, Scenario, ScriptedBackend};
use steproute_core::trace::{answer_matches, boxed_answer, Action, Policy, Trace};
use thiserror::Error;

use crate::config::{ConfigError, ServiceConfig, LISTEN_ENV};
use crate::sink::TraceSink;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "steproute", version, about = "Step-wise small/large model routing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Route one question against the configured backends.
    Run(RunArgs),
    /// Sweep thresholds over scenario files or a question set.
    Sweep(SweepArgs),
    /// Run a scenario through the scripted backends and latency model.
    Simulate(SimulateArgs),
    /// Histogram and bimodality of a step metric over JSONL traces.
    Analyze(AnalyzeArgs),
    /// Start the OpenAI-compatible proxy.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON service config; flags below override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub listen: Option<String>,
    #[arg(long, global = true)]
    pub small_endpoint: Option<String>,
    #[arg(long, global = true)]
    pub small_model: Option<String>,
    /// Top-k logprobs requested from the small backend.
    #[arg(long, global = true)]
    pub small_k: Option<usize>,
    #[arg(long, global = true)]
    pub large_endpoint: Option<String>,
    #[arg(long, global = true)]
    pub large_model: Option<String>,
    #[arg(long, global = true)]
    pub large_k: Option<usize>,
    /// init-entropy, step-entropy, step-perplexity, random-score,
    /// always-small or always-large.
    #[arg(long, global = true)]
    pub policy: Option<Policy>,
    /// Routing threshold in nats.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Think-phase token budget.
    #[arg(long, global = true)]
    pub budget: Option<usize>,
    /// Step delimiter; `\n` and `\t` escapes are understood.
    #[arg(long, global = true)]
    pub delimiter: Option<String>,
    #[arg(long, global = true)]
    pub think_open: Option<String>,
    #[arg(long, global = true)]
    pub think_close: Option<String>,
    #[arg(long, global = true)]
    pub trace_sink: Option<PathBuf>,
    #[arg(long, global = true)]
    pub log_level: Option<String>,
    #[arg(long, global = true)]
    pub include_reasoning: Option<bool>,
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

fn override_backend(slot: &mut Option<OpenAiConfig>, endpoint: &Option<String>, model: &Option<String>, k: Option<usize>) {
    if endpoint.is_none() && model.is_none() && k.is_none() {
        return;
    }
    let b = slot.get_or_insert_with(|| OpenAiConfig::new("", ""));
    if let Some(e) = endpoint {
        b.endpoint = e.clone();
    }
    if let Some(m) = model {
        b.model = m.clone();
    }
    if let Some(k) = k {
        b.top_logprobs_k = k;
    }
}

impl ConfigArgs {
    /// Loads the config file (if any), applies the environment listen
    /// override and then the flags, and validates the result.
    pub fn resolve(&self) -> Result<ServiceConfig, ConfigError> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| ConfigError::Io { path: path.display().to_string(), reason: e.to_string() })?;
                serde_json::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?
            }
            None => ServiceConfig::default(),
        };
        if let Ok(listen) = std::env::var(LISTEN_ENV) {
            c.listen = listen;
        }
        if let Some(l) = &self.listen {
            c.listen = l.clone();
        }
        override_backend(&mut c.small, &self.small_endpoint, &self.small_model, self.small_k);
        override_backend(&mut c.large, &self.large_endpoint, &self.large_model, self.large_k);
        let pc = &mut c.router.policy;
        if let Some(p) = self.policy {
            pc.policy = p;
        }
        if let Some(t) = self.tau {
            pc.threshold = t;
        }
        if let Some(s) = self.seed {
            pc.rng_seed = s;
        }
        if let Some(b) = self.budget {
            pc.budget_tokens = b;
        }
        let seg = &mut c.router.segmenter;
        if let Some(d) = &self.delimiter {
            seg.delimiter = unescape(d);
        }
        if let Some(o) = &self.think_open {
            seg.think_open = unescape(o);
        }
        if let Some(cl) = &self.think_close {
            seg.think_close = unescape(cl);
        }
        if let Some(s) = &self.trace_sink {
            c.trace_sink = Some(s.clone());
        }
        if let Some(l) = &self.log_level {
            c.log_level = l.clone();
        }
        if let Some(r) = self.include_reasoning {
            c.include_reasoning = r;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Plain-text file holding the question.
    #[arg(long)]
    pub question_file: PathBuf,
    /// Expected answer, for an exact-match verdict.
    #[arg(long)]
    pub expected: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["scenario_dir", "questions"])))]
pub struct SweepArgs {
    /// Comma-separated thresholds in nats.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS.to_vec())]
    pub thresholds: Vec<f64>,
    /// Directory of scenario JSON files, routed through scripted backends.
    #[arg(long)]
    pub scenario_dir: Option<PathBuf>,
    /// JSONL file of `{"question": ..., "expected": ...}` routed against the
    /// configured backends.
    #[arg(long)]
    pub questions: Option<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Speculative-decoding draft length for large-model calls.
    #[arg(long, requires = "spec_acceptance")]
    pub spec_draft: Option<u32>,
    /// Speculative-decoding per-token acceptance rate.
    #[arg(long, requires = "spec_draft")]
    pub spec_acceptance: Option<f64>,
    /// Append the trace to this JSONL file (defaults to the configured sink).
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// JSONL trace files.
    #[arg(long, num_args = 1.., required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long, default_value = "h_init")]
    pub metric: MetricName,
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
    /// Histogram data file; defaults to `<first trace file>.<metric>.dat`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn init_logging(level: tracing::Level) {
    let _ = tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).try_init();
}

/// Runs a parsed command, writing its report to stdout.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn model_tag(m: Model) -> &'static str {
    match m {
        Model::Small => "[SLM]",
        Model::Large => "[LLM]",
    }
}

/// Per-step table plus totals.
pub fn trace_summary(trace: &Trace, latency: Option<&LatencyBreakdown>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "policy: {}  tau: {}", trace.policy, trace.threshold);
    let _ = writeln!(out, "{:>4}  {:<5}  {:<9}  {:>8}  {:>6}  {:>10}  boundary", "step", "model", "action", "h_init", "tokens", "latency_ms");
    for (step, decision) in trace.steps.iter().zip(&trace.decisions) {
        let h = step.metrics.h_init.map_or("-".to_owned(), |h| format!("{h:.4}"));
        let action = match decision.action {
            Action::Delegate => "delegate",
            Action::Intervene => "intervene",
        };
        let boundary = serde_json::to_value(step.boundary).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        let _ = writeln!(
            out,
            "{:>4}  {:<5}  {:<9}  {:>8}  {:>6}  {:>10.1}  {}",
            decision.step_index,
            model_tag(step.generator),
            action,
            h,
            step.token_count,
            step.latency_ms(),
            boundary
        );
    }
    let n = trace.decisions.len();
    let k = trace.interventions();
    let rate = if n > 0 { 100.0 * k as f64 / n as f64 } else { 0.0 };
    let _ = writeln!(out, "interventions: {k}/{n} ({rate:.1}%)");
    let a = &trace.accounting;
    let _ = writeln!(
        out,
        "tokens: small {} large {} discarded {} probes {} answer {}",
        a.small_tokens, a.large_tokens, a.discarded_tokens, a.probe_count, a.answer_tokens
    );
    match latency {
        Some(l) => {
            let _ = writeln!(out, "latency_ms (simulated): think {} answer {} total {}", l.think_ms(), l.answer_ms, l.total_ms);
        }
        None => {
            let _ = writeln!(out, "latency_ms: think {:.1} answer {:.1} total {:.1}", a.think_ms(), a.answer_ms, a.total_ms());
        }
    }
    if let Some(answer) = &trace.answer {
        let shown = boxed_answer(&answer.text).unwrap_or(answer.text.trim());
        let _ = writeln!(out, "answer {}: {}", model_tag(answer.generator), shown);
    }
    if let Some(f) = &trace.failure {
        let _ = writeln!(out, "failure: {f}");
    }
    out
}

fn live_backends(config: &ServiceConfig) -> Result<(OpenAiBackend, OpenAiBackend), CliError> {
    let (s, l) = config.require_backends()?;
    let small = OpenAiBackend::new(s.clone()).map_err(|e| CliError::Usage(format!("small backend: {e}")))?;
    let large = OpenAiBackend::new(l.clone()).map_err(|e| CliError::Usage(format!("large backend: {e}")))?;
    Ok((small, large))
}

fn cmd_run(a: RunArgs) -> Result<(), CliError> {
    let config = a.config.resolve()?;
    init_logging(config.log_level());
    let question = std::fs::read_to_string(&a.question_file)
        .map_err(|e| runtime(format!("cannot read {}: {e}", a.question_file.display())))?;
    let (small, large) = live_backends(&config)?;
    let sink = config.trace_sink.as_ref().map(TraceSink::new);
    let router = Router::new(&small, &large, &config.router).map_err(|e| CliError::Usage(e.to_string()))?;
    let (trace, failure) = match router.run_trace(question.trim_end()) {
        Ok(t) => (t, None),
        Err(e) => match e.partial_trace() {
            Some(p) => (p.clone(), Some(e.to_string())),
            None => return Err(runtime(e)),
        },
    };
    print!("{}", trace_summary(&trace, None));
    if let Some(expected) = &a.expected {
        println!("correct: {}", answer_matches(trace.final_answer(), expected));
    }
    if let Some(sink) = sink {
        let record = sink.record(&trace).map_err(runtime)?;
        println!("trace_id: {}", record.id);
    }
    match failure {
        Some(f) => Err(runtime(f)),
        None => Ok(()),
    }
}

fn load_scenarios(dir: &Path) -> Result<Vec<(String, Scenario)>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| runtime(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(runtime(format!("no scenario files in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| Scenario::load(&p).map(|s| (p.display().to_string(), s)).map_err(|e| runtime(format!("{}: {e}", p.display()))))
        .collect()
}

#[derive(Debug, Deserialize)]
struct QuestionLine {
    question: String,
    #[serde(default)]
    expected: Option<String>,
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let config = a.config.resolve()?;
    init_logging(config.log_level());
    if a.thresholds.iter().any(|t| !t.is_finite()) {
        return Err(CliError::Usage("thresholds must be finite".into()));
    }
    let report = if let Some(dir) = &a.scenario_dir {
        let scenarios = load_scenarios(dir)?;
        let pairs: Vec<(ScriptedBackend, ScriptedBackend)> =
            scenarios.iter().map(|(_, s)| ScriptedBackend::pair(s, &config.router)).collect();
        let cases: Vec<SweepCase<'_>> = scenarios
            .iter()
            .zip(&pairs)
            .map(|((_, s), (small, large))| SweepCase {
                question: s.question.clone(),
                small,
                large,
                expected: Some(s.answer_oracle.clone()),
            })
            .collect();
        let latency = |i: usize, t: &Trace| simulate_trace(t, &scenarios[i].1.profile).map_or(f64::NAN, |l| l.total_ms as f64);
        sweep(&cases, &a.thresholds, &config.router, &latency)
    } else {
        let path = a.questions.as_ref().expect("argument group guarantees a source");
        let text = std::fs::read_to_string(path).map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
        let mut questions = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let q: QuestionLine =
                serde_json::from_str(line).map_err(|e| runtime(format!("{}:{}: {e}", path.display(), i + 1)))?;
            questions.push(q);
        }
        let (small, large) = live_backends(&config)?;
        let cases: Vec<SweepCase<'_>> = questions
            .into_iter()
            .map(|q| SweepCase { question: q.question, small: &small, large: &large, expected: q.expected })
            .collect();
        sweep(&cases, &a.thresholds, &config.router, &wall_latency)
    };
    let report = report.map_err(|e| match e {
        RouteError::Config(m) => CliError::Usage(m),
        other => runtime(other),
    })?;
    let table = sweep_table(&report);
    print!("{}", table.text);
    if let Some(csv) = &a.csv {
        std::fs::write(csv, &table.csv).map_err(|e| runtime(format!("cannot write {}: {e}", csv.display())))?;
    }
    if let Some(sink) = config.trace_sink.as_ref().map(TraceSink::new) {
        for cell in &report.cells {
            for t in &cell.traces {
                sink.record(t).map_err(runtime)?;
            }
        }
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<(), CliError> {
    let config = a.config.resolve()?;
    init_logging(config.log_level());
    let mut scenario = Scenario::load(&a.scenario).map_err(|e| runtime(format!("{}: {e}", a.scenario.display())))?;
    if let (Some(n), Some(alpha)) = (a.spec_draft, a.spec_acceptance) {
        scenario.profile = scenario.profile.with_spec(n, alpha);
        scenario.profile.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let (small, large) = ScriptedBackend::pair(&scenario, &config.router);
    let router = Router::new(&small, &large, &config.router).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut trace = router.run_trace(&scenario.question).map_err(runtime)?;
    let latency = apply_simulated_latency(&mut trace, &scenario.profile).map_err(runtime)?;
    println!("scenario: {}", a.scenario.display());
    print!("{}", trace_summary(&trace, Some(&latency)));
    println!("correct: {}", answer_matches(trace.final_answer(), &scenario.answer_oracle));
    if let Some(path) = a.trace_out.as_ref().or(config.trace_sink.as_ref()) {
        let record = TraceSink::new(path).record(&trace).map_err(runtime)?;
        println!("trace_id: {}", record.id);
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    if a.bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let mut traces = Vec::new();
    for path in &a.traces {
        let records = read_jsonl(path).map_err(runtime)?;
        traces.extend(records.iter().map(|r| r.to_trace()));
    }
    let values: Vec<f64> = metric_samples(&traces, a.metric).into_iter().map(|s| s.value).collect();
    let hist = histogram(&values, a.bins).map_err(|e| runtime(format!("{}: {e}", a.metric)))?;
    let out = a.out.clone().unwrap_or_else(|| {
        let mut name = a.traces[0].clone().into_os_string();
        name.push(format!(".{}.dat", a.metric));
        PathBuf::from(name)
    });
    std::fs::write(&out, hist.to_dat(a.metric.as_str())).map_err(|e| runtime(format!("cannot write {}: {e}", out.display())))?;
    println!("traces: {}  samples: {}  metric: {}", traces.len(), values.len(), a.metric);
    match bimodality_coefficient(&values) {
        Ok(bc) => println!("bimodality_coefficient: {bc:.4} ({})", if bc > 5.0 / 9.0 { "bimodal" } else { "unimodal" }),
        Err(e) => println!("bimodality_coefficient: n/a ({e})"),
    }
    println!("histogram: {}", out.display());
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<(), CliError> {
    let config = a.config.resolve()?;
    config.require_backends()?;
    init_logging(config.log_level());
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(crate::server::serve(config)).map_err(|e| match e {
        crate::server::ServeError::Config(c) => CliError::from(c),
        other => runtime(other),
    })
}

