//! Uncertainty metrics over token distributions and per-token logprob streams.
//!
//! Everything here is in nats. Backends usually hand back a truncated top-k
//! list of logprobs rather than the full vocabulary, so a [`TokenDistribution`]
//! carries the unseen probability mass as an explicit `tail_mass` that counts
//! as one aggregate outcome when computing entropy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Allowed deviation of `Σp + tail` from 1.
pub const MASS_TOLERANCE: f64 = 1e-6;

/// Excess mass above 1 that [`normalize_probe`] clamps instead of rejecting.
pub const OVERSHOOT_TOLERANCE: f64 = 1e-4;

/// Logprobs above zero by at most this much are treated as zero.
pub const LOGPROB_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertaintyError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("malformed probe: {0}")]
    MalformedProbe(String),

    #[error("step has no tokens")]
    EmptyStep,

    #[error("invalid token statistic at position {index}: {reason}")]
    InvalidTokenStat { index: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, UncertaintyError>;

/// One candidate token and its probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: String,
    pub prob: f64,
}

/// A (possibly truncated) next-token distribution.
///
/// Entries are kept sorted by descending probability; ties keep their input
/// order. The invariants are checked once at construction, so every value of
/// this type is a valid distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenDistribution {
    entries: Vec<TokenProb>,
    tail_mass: f64,
}

impl TokenDistribution {
    pub fn new(mut entries: Vec<TokenProb>, tail_mass: f64) -> Result<Self> {
        if entries.is_empty() {
            return Err(UncertaintyError::InvalidDistribution("no entries".into()));
        }
        for e in &entries {
            if !e.prob.is_finite() || e.prob <= 0.0 || e.prob > 1.0 + MASS_TOLERANCE {
                return Err(UncertaintyError::InvalidDistribution(format!(
                    "entry {:?} has probability {}",
                    e.token, e.prob
                )));
            }
        }
        if !tail_mass.is_finite() || !(-MASS_TOLERANCE..=1.0 + MASS_TOLERANCE).contains(&tail_mass) {
            return Err(UncertaintyError::InvalidDistribution(format!(
                "tail mass {tail_mass} outside [0, 1]"
            )));
        }
        let tail_mass = tail_mass.clamp(0.0, 1.0);
        let total: f64 = entries.iter().map(|e| e.prob).sum::<f64>() + tail_mass;
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(UncertaintyError::InvalidDistribution(format!(
                "total mass {total} deviates from 1"
            )));
        }
        entries.sort_by(|a, b| b.prob.total_cmp(&a.prob));
        Ok(Self { entries, tail_mass })
    }

    /// Builds a distribution from `(token, prob)` pairs, assigning whatever
    /// mass is missing to the tail bucket.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, f64)>) -> Result<Self> {
        let entries: Vec<TokenProb> = pairs
            .into_iter()
            .map(|(token, prob)| TokenProb { token: token.into(), prob })
            .collect();
        let sum: f64 = entries.iter().map(|e| e.prob).sum();
        if sum > 1.0 + MASS_TOLERANCE {
            return Err(UncertaintyError::InvalidDistribution(format!(
                "entry mass {sum} exceeds 1"
            )));
        }
        Self::new(entries, (1.0 - sum).max(0.0))
    }

    pub fn one_hot(token: impl Into<String>) -> Self {
        Self {
            entries: vec![TokenProb { token: token.into(), prob: 1.0 }],
            tail_mass: 0.0,
        }
    }

    pub fn entries(&self) -> &[TokenProb] {
        &self.entries
    }

    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    /// The most probable listed token.
    pub fn mode(&self) -> &TokenProb {
        &self.entries[0]
    }

    /// Number of strictly positive outcomes, counting a non-zero tail as one.
    pub fn support(&self) -> usize {
        self.entries.len() + usize::from(self.tail_mass > 0.0)
    }
}

#[derive(Deserialize)]
struct RawDistribution {
    entries: Vec<TokenProb>,
    #[serde(default)]
    tail_mass: Option<f64>,
}

impl<'de> Deserialize<'de> for TokenDistribution {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawDistribution::deserialize(d)?;
        let res = match raw.tail_mass {
            Some(t) => TokenDistribution::new(raw.entries, t),
            None => TokenDistribution::from_pairs(raw.entries.into_iter().map(|e| (e.token, e.prob))),
        };
        res.map_err(serde::de::Error::custom)
    }
}

/// `-p ln p` with the `0 ln 0 = 0` convention.
fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

/// Shannon entropy in nats, treating the tail as a single outcome.
pub fn shannon_entropy(dist: &TokenDistribution) -> f64 {
    let h: f64 = dist.entries.iter().map(|e| plogp(e.prob)).sum::<f64>() + plogp(dist.tail_mass);
    h.max(0.0)
}

/// Entropy of the first-token distribution of a step.
pub fn initial_token_entropy(probe: &TokenDistribution) -> f64 {
    shannon_entropy(probe)
}

/// Per-token statistics of a generated token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStat {
    /// Log-probability of the sampled token.
    pub logprob: f64,
    /// Entropy of the distribution the token was sampled from.
    pub entropy: f64,
}

/// Per-token logprobs and entropies of one reasoning step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StepLogprobs {
    tokens: Vec<TokenStat>,
}

impl StepLogprobs {
    pub fn new(tokens: Vec<TokenStat>) -> Result<Self> {
        for (index, t) in tokens.iter().enumerate() {
            if !t.logprob.is_finite() || t.logprob > LOGPROB_TOLERANCE {
                return Err(UncertaintyError::InvalidTokenStat {
                    index,
                    reason: format!("logprob {}", t.logprob),
                });
            }
            if !t.entropy.is_finite() || t.entropy < 0.0 {
                return Err(UncertaintyError::InvalidTokenStat {
                    index,
                    reason: format!("entropy {}", t.entropy),
                });
            }
        }
        let tokens = tokens
            .into_iter()
            .map(|t| TokenStat { logprob: t.logprob.min(0.0), entropy: t.entropy })
            .collect();
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[TokenStat] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, stat: TokenStat) -> Result<()> {
        let checked = StepLogprobs::new(vec![stat])?;
        self.tokens.extend(checked.tokens);
        Ok(())
    }
}

/// Mean per-token entropy of a step.
pub fn step_entropy(step: &StepLogprobs) -> Result<f64> {
    if step.is_empty() {
        return Err(UncertaintyError::EmptyStep);
    }
    let first = step.tokens[0].entropy;
    // A constant sequence must come back bit-for-bit; summation would not.
    if step.tokens.iter().all(|t| t.entropy == first) {
        return Ok(first);
    }
    Ok(step.tokens.iter().map(|t| t.entropy).sum::<f64>() / step.len() as f64)
}

/// Exponentiated mean negative log-likelihood of the sampled tokens.
pub fn step_perplexity(step: &StepLogprobs) -> Result<f64> {
    if step.is_empty() {
        return Err(UncertaintyError::EmptyStep);
    }
    let mean_nll = -step.tokens.iter().map(|t| t.logprob).sum::<f64>() / step.len() as f64;
    Ok(mean_nll.exp().max(1.0))
}

/// How to treat probability mass missing from a truncated top-k list.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruncationPolicy {
    /// Keep the missing mass as one aggregate outcome.
    #[default]
    TailBucket,
    /// Rescale the listed entries to sum to one.
    Renormalize,
}

/// Turns raw top-k `(token, logprob)` pairs into a [`TokenDistribution`].
pub fn normalize_probe<S: AsRef<str>>(
    raw: &[(S, f64)],
    policy: TruncationPolicy,
) -> Result<TokenDistribution> {
    if raw.is_empty() {
        return Err(UncertaintyError::MalformedProbe("empty top-k list".into()));
    }
    let mut entries = Vec::with_capacity(raw.len());
    for (token, lp) in raw {
        let token = token.as_ref();
        if !lp.is_finite() {
            return Err(UncertaintyError::MalformedProbe(format!(
                "non-finite logprob {lp} for {token:?}"
            )));
        }
        if *lp > LOGPROB_TOLERANCE {
            return Err(UncertaintyError::MalformedProbe(format!(
                "positive logprob {lp} for {token:?}"
            )));
        }
        let prob = lp.min(0.0).exp();
        // exp of a very negative logprob underflows; such entries carry no mass.
        if prob > 0.0 {
            entries.push(TokenProb { token: token.to_owned(), prob });
        }
    }
    if entries.is_empty() {
        return Err(UncertaintyError::MalformedProbe("all listed probabilities underflow".into()));
    }
    let sum: f64 = entries.iter().map(|e| e.prob).sum();
    if sum > 1.0 + OVERSHOOT_TOLERANCE {
        return Err(UncertaintyError::MalformedProbe(format!("listed mass {sum} exceeds 1")));
    }
    match policy {
        TruncationPolicy::TailBucket => {
            if sum > 1.0 {
                for e in &mut entries {
                    e.prob /= sum;
                }
                TokenDistribution::new(entries, 0.0)
            } else {
                TokenDistribution::new(entries, (1.0 - sum).max(0.0))
            }
        }
        TruncationPolicy::Renormalize => {
            for e in &mut entries {
                e.prob /= sum;
            }
            TokenDistribution::new(entries, 0.0)
        }
    }
}

/// Builds a distribution over `support` tokens whose entropy is `target` nats:
/// the first token is the mode and the rest share the remaining mass evenly.
///
/// `target` is clamped to `[0, ln support)`. Used by scenario generators.
pub fn distribution_with_entropy(tokens: &[String], target: f64) -> Result<TokenDistribution> {
    let m = tokens.len();
    if m == 0 {
        return Err(UncertaintyError::InvalidDistribution("no tokens".into()));
    }
    if m == 1 || target <= 0.0 {
        return Ok(TokenDistribution::one_hot(tokens[0].clone()));
    }
    let max_h = (m as f64).ln();
    let target = target.min(max_h - 1e-9);
    let entropy_at = |p: f64| plogp(p) + (m - 1) as f64 * plogp((1.0 - p) / (m - 1) as f64);
    // entropy_at is decreasing on [1/m, 1].
    let (mut lo, mut hi) = (1.0 / m as f64, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if entropy_at(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = 0.5 * (lo + hi);
    if p >= 1.0 {
        return Ok(TokenDistribution::one_hot(tokens[0].clone()));
    }
    let rest = (1.0 - p) / (m - 1) as f64;
    let mut entries = vec![TokenProb { token: tokens[0].clone(), prob: p }];
    entries.extend(tokens[1..].iter().map(|t| TokenProb { token: t.clone(), prob: rest }));
    TokenDistribution::new(entries, 0.0)
}
