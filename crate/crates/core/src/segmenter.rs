//! Streaming segmentation of generated text into reasoning steps.
//!
//! Tokens are fed one at a time. A step ends when the delimiter (`"\n\n"` by
//! default) completes, with the delimiter kept at the tail of the step. A run
//! of repeated delimiter characters (`"a\n\n\n"`) extends the same boundary
//! instead of producing empty steps, and a delimiter only counts once the step
//! holds some other content. Characters of the completing token that follow
//! the run open the next step.
//!
//! The segmenter also tracks the `<think>` / `</think>` markers and the
//! reasoning-token budget.

use serde::{Deserialize, Serialize};

pub const DEFAULT_DELIMITER: &str = "\n\n";
pub const DEFAULT_THINK_OPEN: &str = "<think>";
pub const DEFAULT_THINK_CLOSE: &str = "</think>";
pub const DEFAULT_BUDGET: usize = 8192;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub delimiter: String,
    pub think_open: String,
    pub think_close: String,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            delimiter: DEFAULT_DELIMITER.to_owned(),
            think_open: DEFAULT_THINK_OPEN.to_owned(),
            think_close: DEFAULT_THINK_CLOSE.to_owned(),
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.delimiter.is_empty() {
            return Err("delimiter must not be empty".into());
        }
        if self.think_open.is_empty() || self.think_close.is_empty() {
            return Err("think markers must not be empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PreThink,
    Thinking,
    Answering,
}

/// Why a step ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Delimiter,
    ThinkClosed,
    Eos,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmentEvent {
    ThinkOpened {
        token_index: usize,
    },
    /// `span` is the half-open range of token indices attributed to the step:
    /// every token up to and including the one that completed the boundary.
    StepComplete {
        text: String,
        span: (usize, usize),
        boundary: Boundary,
    },
    ThinkClosed {
        token_index: usize,
    },
    BudgetExhausted {
        token_index: usize,
    },
    StreamEnd,
}

/// Per-request segmentation state.
#[derive(Debug, Clone)]
pub struct StepSegmenter {
    config: SegmenterConfig,
    budget: usize,
    phase: Phase,
    buffer: String,
    in_run: bool,
    run_char: char,
    tokens_seen: usize,
    think_tokens: usize,
    step_start: usize,
    exhausted: bool,
}

impl StepSegmenter {
    pub fn new(config: SegmenterConfig, budget: usize) -> Self {
        let run_char = config.delimiter.chars().last().unwrap_or('\n');
        Self {
            config,
            budget,
            phase: Phase::PreThink,
            buffer: String::new(),
            in_run: false,
            run_char,
            tokens_seen: 0,
            think_tokens: 0,
            step_start: 0,
            exhausted: false,
        }
    }

    /// Starts inside the think block, for prompts that already end with the
    /// think-open marker.
    pub fn in_phase(mut self, phase: Phase) -> Self {
        self.phase = phase;
        self
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Think-phase tokens consumed so far.
    pub fn think_tokens(&self) -> usize {
        self.think_tokens
    }

    pub fn residual(&self) -> &str {
        &self.buffer
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted
    }

    pub fn feed(&mut self, token: &str) -> Vec<SegmentEvent> {
        let index = self.tokens_seen;
        self.tokens_seen += 1;
        let mut events = Vec::new();

        if self.phase == Phase::Answering || self.exhausted {
            self.buffer.push_str(token);
            return events;
        }
        self.think_tokens += 1;

        for (offset, ch) in token.char_indices() {
            if self.in_run {
                if ch == self.run_char {
                    self.buffer.push(ch);
                    continue;
                }
                self.complete_step(index, Boundary::Delimiter, &mut events);
            }
            self.buffer.push(ch);
            self.after_char(index, &mut events);
            if self.phase == Phase::Answering {
                // the rest of this token belongs to the answer
                self.buffer.push_str(&token[offset + ch.len_utf8()..]);
                break;
            }
        }

        if self.in_run {
            self.complete_step(index, Boundary::Delimiter, &mut events);
        }

        if self.phase != Phase::Answering && self.think_tokens >= self.budget {
            if !self.buffer.is_empty() {
                self.complete_step(index, Boundary::Budget, &mut events);
            }
            self.exhausted = true;
            events.push(SegmentEvent::BudgetExhausted { token_index: index });
        }
        events
    }

    pub fn flush(&mut self) -> Vec<SegmentEvent> {
        let mut events = Vec::new();
        if !self.buffer.is_empty() {
            let boundary = if self.in_run { Boundary::Delimiter } else { Boundary::Eos };
            let text = std::mem::take(&mut self.buffer);
            events.push(SegmentEvent::StepComplete {
                text,
                span: (self.step_start, self.tokens_seen),
                boundary,
            });
            self.step_start = self.tokens_seen;
            self.in_run = false;
        }
        events.push(SegmentEvent::StreamEnd);
        events
    }

    fn after_char(&mut self, index: usize, events: &mut Vec<SegmentEvent>) {
        if self.phase == Phase::PreThink && self.buffer.ends_with(self.config.think_open.as_str()) {
            self.phase = Phase::Thinking;
            events.push(SegmentEvent::ThinkOpened { token_index: index });
            return;
        }
        if self.buffer.ends_with(self.config.think_close.as_str()) {
            self.complete_step(index, Boundary::ThinkClosed, events);
            self.phase = Phase::Answering;
            events.push(SegmentEvent::ThinkClosed { token_index: index });
            return;
        }
        let delim = self.config.delimiter.as_str();
        if self.buffer.ends_with(delim) {
            let content = &self.buffer[..self.buffer.len() - delim.len()];
            if content.chars().any(|c| c != self.run_char) {
                self.in_run = true;
            }
        }
    }

    fn complete_step(&mut self, index: usize, boundary: Boundary, events: &mut Vec<SegmentEvent>) {
        let text = std::mem::take(&mut self.buffer);
        let end = index + 1;
        events.push(SegmentEvent::StepComplete { text, span: (self.step_start, end), boundary });
        self.step_start = end;
        self.in_run = false;
    }
}
