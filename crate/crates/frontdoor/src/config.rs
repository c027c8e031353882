//! Service configuration: one JSON file, validated field by field at load.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use steproute_core::backend::openai::OpenAiConfig;
use steproute_core::routing::RouterConfig;
use thiserror::Error;

pub const LISTEN_ENV: &str = "STEPROUTE_LISTEN";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },

    #[error("cannot parse config: {0}")]
    Parse(String),

    #[error("invalid config field `{field}`: {reason}")]
    Field { field: String, reason: String },
}

impl ConfigError {
    fn field(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Field { field: field.into(), reason: reason.into() }
    }
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}
fn default_log_level() -> String {
    "info".into()
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub small: Option<OpenAiConfig>,
    #[serde(default)]
    pub large: Option<OpenAiConfig>,
    /// Policy, threshold, seed, budget, sampling, segmenter and prompt
    /// template.
    #[serde(default)]
    pub router: RouterConfig,
    #[serde(default)]
    pub trace_sink: Option<PathBuf>,
    #[serde(default = "default_log_level")]
    pub log_level: String,
    /// Return the think-phase text, wrapped in the think markers, ahead of
    /// the answer.
    #[serde(default = "default_true")]
    pub include_reasoning: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: default_listen(),
            small: None,
            large: None,
            router: RouterConfig::default(),
            trace_sink: None,
            log_level: default_log_level(),
            include_reasoning: true,
        }
    }
}

impl ServiceConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        Self::from_json(&text)
    }

    /// Checks every field that is present. Backends are optional here;
    /// see [`ServiceConfig::require_backends`].
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.listen_addr()?;
        let pc = &self.router.policy;
        if !pc.threshold.is_finite() {
            return Err(ConfigError::field("threshold", format!("must be finite, got {}", pc.threshold)));
        }
        if pc.budget_tokens < 1 {
            return Err(ConfigError::field("budget_tokens", "must be at least 1"));
        }
        if !(pc.sampling.temperature >= 0.0 && pc.sampling.temperature.is_finite()) {
            return Err(ConfigError::field("sampling.temperature", "must be a finite non-negative number"));
        }
        if !(pc.sampling.top_p > 0.0 && pc.sampling.top_p <= 1.0) {
            return Err(ConfigError::field("sampling.top_p", "must lie in (0, 1]"));
        }
        let seg = &self.router.segmenter;
        seg.validate().map_err(|e| ConfigError::field("segmenter", e))?;
        if !self.router.prompt_template.contains("{question}") {
            return Err(ConfigError::field("prompt_template", "must contain {question}"));
        }
        for (name, backend) in [("small", &self.small), ("large", &self.large)] {
            if let Some(b) = backend {
                validate_backend(name, b)?;
            }
        }
        if self.log_level.parse::<tracing::Level>().is_err() {
            return Err(ConfigError::field("log_level", format!("unknown level {:?}", self.log_level)));
        }
        Ok(())
    }

    /// Both backends must be configured to serve or route live.
    pub fn require_backends(&self) -> Result<(&OpenAiConfig, &OpenAiConfig), ConfigError> {
        let small = self.small.as_ref().ok_or_else(|| ConfigError::field("small", "backend is not configured"))?;
        let large = self.large.as_ref().ok_or_else(|| ConfigError::field("large", "backend is not configured"))?;
        Ok((small, large))
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.listen
            .parse()
            .map_err(|_| ConfigError::field("listen", format!("not a socket address: {:?}", self.listen)))
    }

    pub fn log_level(&self) -> tracing::Level {
        self.log_level.parse().unwrap_or(tracing::Level::INFO)
    }
}

fn validate_backend(name: &str, b: &OpenAiConfig) -> Result<(), ConfigError> {
    if b.endpoint.trim().is_empty() {
        return Err(ConfigError::field(format!("{name}.endpoint"), "must not be empty"));
    }
    if !(b.endpoint.starts_with("http://") || b.endpoint.starts_with("https://")) {
        return Err(ConfigError::field(format!("{name}.endpoint"), format!("not an http(s) URL: {:?}", b.endpoint)));
    }
    if b.model.trim().is_empty() {
        return Err(ConfigError::field(format!("{name}.model"), "must not be empty"));
    }
    if b.top_logprobs_k < 1 {
        return Err(ConfigError::field(format!("{name}.top_logprobs_k"), "must be at least 1"));
    }
    if b.max_attempts < 1 {
        return Err(ConfigError::field(format!("{name}.max_attempts"), "must be at least 1"));
    }
    Ok(())
}
