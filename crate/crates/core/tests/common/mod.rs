//! Independent oracles and helpers shared by the integration tests.
#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};

use steproute_core::backend::{AnswerOutput, Backend, BackendError, Probe, Sampling, StepOutput, StepRequest};

/// `-Σ p ln p` over the listed probabilities and the tail, summed naively.
pub fn naive_entropy(probs: &[f64], tail: f64) -> f64 {
    let mut h = 0.0;
    for &p in probs {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    if tail > 0.0 {
        h -= tail * tail.ln();
    }
    h
}

pub fn naive_mean(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    s / xs.len() as f64
}

pub fn rel_close(got: f64, want: f64, tol: f64) -> bool {
    if want == 0.0 {
        got.abs() <= tol
    } else {
        ((got - want) / want).abs() <= tol
    }
}

/// Character-level reference segmentation of think-phase text under the
/// default "\n\n" delimiter, placed at token granularity.
///
/// A step ends once it holds a non-newline character followed by two
/// newlines; the boundary sits at the end of that newline run, or at the end
/// of the token that completed the delimiter if the run continues into a
/// later token. Returns the step texts and, per boundary, the byte range of
/// the newline run it belongs to.
pub fn reference_steps(text: &str, token_ends: &[usize]) -> (Vec<String>, Vec<(usize, usize)>) {
    let bytes = text.as_bytes();
    let mut steps = Vec::new();
    let mut runs = Vec::new();
    let mut start = 0;
    let mut i = start;
    let mut seen_content = false;
    while i < bytes.len() {
        if bytes[i] != b'\n' {
            seen_content = true;
            i += 1;
            continue;
        }
        let run_start = i;
        let mut run_end = i;
        while run_end < bytes.len() && bytes[run_end] == b'\n' {
            run_end += 1;
        }
        if !seen_content || run_end - run_start < 2 {
            i = run_end;
            continue;
        }
        // the delimiter is complete at the second newline of the run
        let trigger = run_start + 1;
        let token_end = token_ends.iter().copied().find(|&e| e > trigger).unwrap_or(bytes.len());
        let boundary = run_end.min(token_end);
        steps.push(text[start..boundary].to_owned());
        runs.push((run_start, run_end));
        start = boundary;
        i = boundary;
        seen_content = false;
    }
    if start < bytes.len() {
        steps.push(text[start..].to_owned());
    }
    (steps, runs)
}

/// Counts calls per operation on an inner backend.
pub struct Counting<B> {
    pub inner: B,
    pub probes: AtomicUsize,
    pub steps: AtomicUsize,
    pub answers: AtomicUsize,
}

impl<B> Counting<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, probes: AtomicUsize::new(0), steps: AtomicUsize::new(0), answers: AtomicUsize::new(0) }
    }

    pub fn probes(&self) -> usize {
        self.probes.load(Ordering::SeqCst)
    }

    pub fn answers(&self) -> usize {
        self.answers.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for Counting<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn probe_first(&self, context: &str, sampling: &Sampling) -> Result<Probe, BackendError> {
        self.probes.fetch_add(1, Ordering::SeqCst);
        self.inner.probe_first(context, sampling)
    }

    fn generate_step(&self, request: &StepRequest<'_>) -> Result<StepOutput, BackendError> {
        self.steps.fetch_add(1, Ordering::SeqCst);
        self.inner.generate_step(request)
    }

    fn generate_answer(&self, context: &str, max_new_tokens: usize, sampling: &Sampling) -> Result<AnswerOutput, BackendError> {
        self.answers.fetch_add(1, Ordering::SeqCst);
        self.inner.generate_answer(context, max_new_tokens, sampling)
    }
}
