//! Persisted form of a trace: one JSON object per line.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Model;
use crate::segmenter::Boundary;
use crate::trace::{Action, FinalAnswer, Policy, ReasoningStep, RoutingDecision, StepMetrics, Trace};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },

    #[error("inconsistent record: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    /// 1-based.
    pub index: usize,
    pub h_init: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl_step: Option<f64>,
    pub score: Option<f64>,
    pub action: Action,
    pub probe_kept: bool,
    pub model: Model,
    pub tokens: usize,
    pub discarded_tokens: usize,
    pub probed: bool,
    pub latency_ms: f64,
    pub small_ms: f64,
    pub large_ms: f64,
    pub boundary: Boundary,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub intervention_rate: f64,
    pub small_tokens: usize,
    pub large_tokens: usize,
    pub discarded_tokens: usize,
    pub probe_count: usize,
    pub answer_tokens: usize,
    pub think_latency_ms: f64,
    pub answer_latency_ms: f64,
    pub total_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    /// RFC 3339.
    pub timestamp: String,
    pub question: String,
    pub prompt: String,
    pub policy: Policy,
    pub threshold: f64,
    pub rows: Vec<StepRow>,
    pub totals: Totals,
    pub final_answer: Option<FinalAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

fn totals_from_rows(rows: &[StepRow], answer: Option<&FinalAnswer>) -> Totals {
    let mut t = Totals::default();
    let mut small_ms = 0.0;
    let mut large_ms = 0.0;
    let mut interventions = 0usize;
    for row in rows {
        match row.model {
            Model::Small => t.small_tokens += row.tokens,
            Model::Large => t.large_tokens += row.tokens,
        }
        t.discarded_tokens += row.discarded_tokens;
        t.probe_count += usize::from(row.probed);
        small_ms += row.small_ms;
        large_ms += row.large_ms;
        interventions += usize::from(row.action == Action::Intervene);
    }
    t.intervention_rate = if rows.is_empty() { 0.0 } else { interventions as f64 / rows.len() as f64 };
    t.think_latency_ms = small_ms + large_ms;
    if let Some(a) = answer {
        t.answer_tokens = a.token_count;
        t.answer_latency_ms = a.elapsed_ms;
    }
    t.total_latency_ms = t.think_latency_ms + t.answer_latency_ms;
    t
}

impl TraceRecord {
    pub fn from_trace(id: impl Into<String>, timestamp: impl Into<String>, trace: &Trace) -> Self {
        let rows: Vec<StepRow> = trace
            .steps
            .iter()
            .zip(&trace.decisions)
            .map(|(s, d)| StepRow {
                index: d.step_index,
                h_init: s.metrics.h_init,
                h_step: s.metrics.h_step,
                ppl_step: s.metrics.ppl_step,
                score: d.score,
                action: d.action,
                probe_kept: d.probe_kept,
                model: s.generator,
                tokens: s.token_count,
                discarded_tokens: s.discarded_tokens,
                probed: s.probed,
                latency_ms: s.latency_ms(),
                small_ms: s.small_ms,
                large_ms: s.large_ms,
                boundary: s.boundary,
                text: s.text.clone(),
            })
            .collect();
        let totals = totals_from_rows(&rows, trace.answer.as_ref());
        Self {
            id: id.into(),
            timestamp: timestamp.into(),
            question: trace.question.clone(),
            prompt: trace.prompt.clone(),
            policy: trace.policy,
            threshold: trace.threshold,
            rows,
            totals,
            final_answer: trace.answer.clone(),
            failure: trace.failure.clone(),
        }
    }

    /// Totals must equal the sums recomputed from the rows, exactly.
    pub fn validate(&self) -> Result<(), RecordError> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.index != i + 1 {
                return Err(RecordError::Inconsistent(format!("row {} carries index {}", i + 1, row.index)));
            }
            if row.latency_ms != row.small_ms + row.large_ms {
                return Err(RecordError::Inconsistent(format!("row {} latency does not add up", i + 1)));
            }
        }
        let expected = totals_from_rows(&self.rows, self.final_answer.as_ref());
        if expected != self.totals {
            return Err(RecordError::Inconsistent(format!(
                "totals {:?} differ from row sums {:?}",
                self.totals, expected
            )));
        }
        Ok(())
    }

    pub fn to_trace(&self) -> Trace {
        let mut trace = Trace::new(&self.question, self.prompt.clone(), self.policy, self.threshold);
        for row in &self.rows {
            trace.steps.push(ReasoningStep {
                text: row.text.clone(),
                generator: row.model,
                boundary: row.boundary,
                token_count: row.tokens,
                metrics: StepMetrics { h_init: row.h_init, h_step: row.h_step, ppl_step: row.ppl_step },
                probed: row.probed,
                discarded_tokens: row.discarded_tokens,
                small_ms: row.small_ms,
                large_ms: row.large_ms,
            });
            trace.decisions.push(RoutingDecision {
                step_index: row.index,
                policy: self.policy,
                h_init_nats: row.h_init,
                score: row.score,
                threshold_nats: self.threshold,
                action: row.action,
                probe_kept: row.probe_kept,
            });
        }
        trace.answer = self.final_answer.clone();
        trace.failure = self.failure.clone();
        trace.recompute_accounting();
        trace
    }
}

fn io_err(path: &Path, e: std::io::Error) -> RecordError {
    RecordError::Io { path: path.display().to_string(), reason: e.to_string() }
}

/// Appends one record as a single line.
pub fn append_jsonl(path: &Path, record: &TraceRecord) -> Result<(), RecordError> {
    let mut line = serde_json::to_string(record).map_err(|e| RecordError::Inconsistent(e.to_string()))?;
    line.push('\n');
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
    file.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
    file.flush().map_err(|e| io_err(path, e))
}

/// Reads every record; blank lines are skipped.
pub fn read_jsonl(path: &Path) -> Result<Vec<TraceRecord>, RecordError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line).map_err(|e| RecordError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}
