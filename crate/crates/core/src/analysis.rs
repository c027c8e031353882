//! Offline statistics over traces: metric histograms, the bimodality
//! coefficient, n-gram overlap between small- and large-model text binned by
//! first-token entropy, and sweep tables.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::routing::{SweepReport, SweepRow};
use crate::sim::BimodalParams;
use crate::trace::Trace;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("no samples")]
    EmptySamples,

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("invalid bins: {0}")]
    InvalidBins(String),

    #[error("empty text")]
    EmptyText,

    #[error("no alignment pairs")]
    NoPairs,
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    HInit,
    HStep,
    PplStep,
}

impl MetricName {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::HInit => "h_init",
            MetricName::HStep => "h_step",
            MetricName::PplStep => "ppl_step",
        }
    }
}

impl std::str::FromStr for MetricName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "h_init" => Ok(MetricName::HInit),
            "h_step" => Ok(MetricName::HStep),
            "ppl_step" => Ok(MetricName::PplStep),
            other => Err(format!("unknown metric {other:?} (expected h_init, h_step or ppl_step)")),
        }
    }
}

impl std::fmt::Display for MetricName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    /// `trace/step`, both 0-based.
    pub step_id: String,
    pub metric: MetricName,
    pub value: f64,
}

/// Every recorded value of `metric` across the traces.
pub fn metric_samples(traces: &[Trace], metric: MetricName) -> Vec<MetricSample> {
    let mut out = Vec::new();
    for (t, trace) in traces.iter().enumerate() {
        for (s, step) in trace.steps.iter().enumerate() {
            let value = match metric {
                MetricName::HInit => step.metrics.h_init,
                MetricName::HStep => step.metrics.h_step,
                MetricName::PplStep => step.metrics.ppl_step,
            };
            if let Some(value) = value {
                out.push(MetricSample { step_id: format!("{t}/{s}"), metric, value });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<Bin>,
    pub total: usize,
}

impl Histogram {
    pub fn counts(&self) -> Vec<usize> {
        self.bins.iter().map(|b| b.count).collect()
    }

    /// Gnuplot-friendly columns: bin centre, count, frequency.
    pub fn to_dat(&self, label: &str) -> String {
        let mut out = format!("# {label}: {} samples, {} bins\n# center\tcount\tfrequency\n", self.total, self.bins.len());
        for b in &self.bins {
            let _ = writeln!(out, "{}\t{}\t{}", 0.5 * (b.lo + b.hi), b.count, b.frequency);
        }
        out
    }
}

fn check_finite(samples: &[f64]) -> Result<()> {
    if samples.is_empty() {
        return Err(AnalysisError::EmptySamples);
    }
    if let Some(v) = samples.iter().find(|v| !v.is_finite()) {
        return Err(AnalysisError::InvalidSample(format!("non-finite value {v}")));
    }
    Ok(())
}

/// Equal-width bins over `[min, max]`; the maximum falls in the last bin.
/// When every sample is equal the first bin holds them all.
pub fn histogram(samples: &[f64], bin_count: usize) -> Result<Histogram> {
    check_finite(samples)?;
    if bin_count < 1 {
        return Err(AnalysisError::InvalidBins("bin_count must be >= 1".into()));
    }
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / bin_count as f64;
    let mut counts = vec![0usize; bin_count];
    for &v in samples {
        let i = if width > 0.0 { (((v - min) / width) as usize).min(bin_count - 1) } else { 0 };
        counts[i] += 1;
    }
    let n = samples.len() as f64;
    let bins = counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| Bin {
            lo: min + width * i as f64,
            hi: if i + 1 == bin_count { max } else { min + width * (i + 1) as f64 },
            count,
            frequency: count as f64 / n,
        })
        .collect();
    Ok(Histogram { bins, total: samples.len() })
}

/// Sarle's bimodality coefficient from the bias-corrected sample skewness
/// and excess kurtosis. Values above 5/9 suggest bimodality.
pub fn bimodality_coefficient(samples: &[f64]) -> Result<f64> {
    let n = samples.len();
    if n < 4 {
        return Err(AnalysisError::InsufficientSamples { needed: 4, got: n });
    }
    check_finite(samples)?;
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in samples {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    if m2 <= 0.0 {
        return Err(AnalysisError::InvalidSample("zero variance".into()));
    }
    let g1 = (nf * (nf - 1.0)).sqrt() / (nf - 2.0) * m3 / m2.powf(1.5);
    let g2 = (nf - 1.0) / ((nf - 2.0) * (nf - 3.0)) * ((nf + 1.0) * (m4 / (m2 * m2) - 3.0) + 6.0);
    let denom = g2 + 3.0 * (nf - 1.0).powi(2) / ((nf - 2.0) * (nf - 3.0));
    Ok((g1 * g1 + 1.0) / denom)
}

pub const DEFAULT_MAX_N: usize = 4;

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> std::collections::HashMap<&'t [&'a str], usize> {
    let mut map = std::collections::HashMap::new();
    for w in tokens.windows(n) {
        *map.entry(w).or_insert(0) += 1;
    }
    map
}

/// Sentence-level BLEU-style overlap on whitespace tokens.
///
/// Geometric mean of clipped n-gram precisions for orders 1 to `max_n`
/// times the brevity penalty. An order with no matches counts as
/// `1 / (c + 1)` for its `c` candidate n-grams, except unigrams: texts that
/// share no word score 0. Orders longer than the candidate are left out.
pub fn ngram_overlap(reference: &str, candidate: &str, max_n: usize) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let c: Vec<&str> = candidate.split_whitespace().collect();
    if r.is_empty() || c.is_empty() {
        return Err(AnalysisError::EmptyText);
    }
    let max_n = max_n.max(1).min(c.len());
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(&c, n);
        let refs = ngram_counts(&r, n);
        let total = c.len() + 1 - n;
        let matched: usize = cand.iter().map(|(g, &k)| k.min(refs.get(g).copied().unwrap_or(0))).sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return Ok(0.0);
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let bp = if c.len() >= r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
    Ok(bp * (log_sum / max_n as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPair {
    pub h_init: f64,
    pub small_text: String,
    pub large_text: String,
    /// Where the pair came from; both texts must share the preceding context.
    #[serde(default)]
    pub provenance: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean_overlap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub bins: Vec<AlignmentBin>,
    /// Pairs whose H_init falls outside the edges.
    pub unbinned: usize,
}

impl AlignmentReport {
    pub fn occupied_means(&self) -> Vec<f64> {
        self.bins.iter().filter_map(|b| b.mean_overlap).collect()
    }
}

/// Mean small-vs-large overlap per H_init bin. Bin `i` is
/// `[edges[i], edges[i+1])`; the last bin also includes its upper edge.
pub fn alignment_by_bin(pairs: &[AlignmentPair], edges: &[f64]) -> Result<AlignmentReport> {
    if pairs.is_empty() {
        return Err(AnalysisError::NoPairs);
    }
    if edges.len() < 2 {
        return Err(AnalysisError::InvalidBins("need at least two edges".into()));
    }
    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(AnalysisError::InvalidBins("edges must be finite and strictly increasing".into()));
    }
    let nb = edges.len() - 1;
    let mut sums = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    let mut unbinned = 0;
    for pair in pairs {
        let h = pair.h_init;
        let slot = (0..nb).find(|&i| h >= edges[i] && (h < edges[i + 1] || (i + 1 == nb && h == edges[nb])));
        match slot {
            Some(i) => {
                sums[i] += ngram_overlap(&pair.large_text, &pair.small_text, DEFAULT_MAX_N)?;
                counts[i] += 1;
            }
            None => unbinned += 1,
        }
    }
    let bins = (0..nb)
        .map(|i| AlignmentBin {
            lo: edges[i],
            hi: edges[i + 1],
            count: counts[i],
            mean_overlap: (counts[i] > 0).then(|| sums[i] / counts[i] as f64),
        })
        .collect();
    Ok(AlignmentReport { bins, unbinned })
}

/// Equal-width edges over `[lo, hi]`.
pub fn even_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

/// Synthetic small/large text pairs whose divergence grows with H_init: the
/// large text rewrites the last `ceil(min(h / full_at, 1) * words)` words of
/// the small text. H_init values follow the mixture in `params`.
pub fn divergence_pairs(seed: u64, n_pairs: usize, words: usize, full_at: f64, params: &BimodalParams) -> Vec<AlignmentPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = |rng: &mut ChaCha8Rng| {
        let (m, s) = if rng.random_bool(params.high_weight) {
            (params.high_mean, params.high_sd)
        } else {
            (params.low_mean, params.low_sd)
        };
        // Box-Muller keeps this independent of the sim's sampler
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (m + s * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()).max(0.0)
    };
    (0..n_pairs)
        .map(|p| {
            let h = mix(&mut rng);
            let small: Vec<String> = (0..words).map(|i| format!("w{}", (p * 7 + i) % 97)).collect();
            let rewrite = ((h / full_at).min(1.0) * words as f64).ceil() as usize;
            let mut large = small.clone();
            for (i, w) in large.iter_mut().enumerate().skip(words - rewrite.min(words)) {
                *w = format!("x{i}");
            }
            AlignmentPair {
                h_init: h,
                small_text: small.join(" "),
                large_text: large.join(" "),
                provenance: Some(format!("synthetic seed {seed} pair {p}")),
            }
        })
        .collect()
}

const HEADER: [&str; 8] = ["label", "policy", "threshold", "accuracy_pct", "latency_ms", "intervention_pct", "completed", "failed"];

fn row_fields(row: &SweepRow) -> [String; 8] {
    [
        row.label.clone(),
        row.policy.to_string(),
        format!("{}", row.threshold),
        row.accuracy.map(|a| format!("{:.2}", a * 100.0)).unwrap_or_else(|| "-".into()),
        format!("{:.1}", row.mean_latency_ms),
        format!("{:.2}", row.intervention_rate * 100.0),
        row.completed.to_string(),
        row.failed.to_string(),
    ]
}

/// CSV rendering; rates as percentages, latency in milliseconds.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER).expect("in-memory write");
    for row in rows {
        w.write_record(row_fields(row)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Column-aligned text rendering of the same table.
pub fn sweep_text(rows: &[SweepRow]) -> String {
    let cells: Vec<[String; 8]> = std::iter::once(HEADER.map(String::from)).chain(rows.iter().map(row_fields)).collect();
    let widths: Vec<usize> = (0..HEADER.len()).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub csv: String,
    pub text: String,
}

pub fn sweep_table(report: &SweepReport) -> SweepTable {
    SweepTable { csv: sweep_csv(&report.rows), text: sweep_text(&report.rows) }
}
