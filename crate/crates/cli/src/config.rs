//! TOML configuration, environment overrides and command-line flags.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use forensic_core::chain::{ChainConfig, DEFAULT_QUERY};
use forensic_core::rulebase::{load_rule_set, RelevanceThreshold, RuleSet};
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const DEFAULT_SERVICE_URL: &str = "http://127.0.0.1:8000";

/// `FORENSIC_SERVICE_URL` sets all three endpoints; the per-service
/// variables win over it.
pub const ENV_SERVICE_URL: &str = "FORENSIC_SERVICE_URL";
pub const ENV_CHAT_URL: &str = "FORENSIC_CHAT_URL";
pub const ENV_EMBED_URL: &str = "FORENSIC_EMBED_URL";
pub const ENV_SEGMENT_URL: &str = "FORENSIC_SEGMENT_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSettings {
    pub chat_url: String,
    pub embed_url: String,
    pub segment_url: String,
    pub timeout_secs: u64,
    pub retry_attempts: u32,
    pub retry_base_delay_ms: u64,
}

impl Default for BackendSettings {
    fn default() -> Self {
        Self {
            chat_url: DEFAULT_SERVICE_URL.into(),
            embed_url: DEFAULT_SERVICE_URL.into(),
            segment_url: DEFAULT_SERVICE_URL.into(),
            timeout_secs: 120,
            retry_attempts: 3,
            retry_base_delay_ms: 250,
        }
    }
}

impl BackendSettings {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Rule set file; the built-in set when absent.
    pub rule_set: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub parallelism: usize,
    pub query: String,
    pub chain: ChainConfig,
    pub backends: BackendSettings,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            rule_set: None,
            output_dir: PathBuf::from("out"),
            parallelism: 1,
            query: DEFAULT_QUERY.into(),
            chain: ChainConfig::default(),
            backends: BackendSettings::default(),
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub stub: bool,
    pub output: Option<PathBuf>,
    pub parallel: Option<usize>,
    pub threshold: Option<f64>,
    pub steps: Option<u32>,
    pub json: bool,
}

impl Config {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| UsageError(format!("invalid configuration: {e}")).into())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// File (if any), then environment, then flags.
    pub fn resolve(flags: &Overrides) -> anyhow::Result<Self> {
        let mut config = match &flags.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        config.apply_env(|k| std::env::var(k).ok());
        if let Some(out) = &flags.output {
            config.output_dir = out.clone();
        }
        if let Some(n) = flags.parallel {
            config.parallelism = n;
        }
        if let Some(t) = flags.threshold {
            config.chain.relevance_threshold =
                RelevanceThreshold::new(t).map_err(|e| UsageError(format!("--threshold: {e}")))?;
        }
        if let Some(n) = flags.steps {
            config.chain.steps = n;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(url) = var(ENV_SERVICE_URL) {
            self.backends.chat_url = url.clone();
            self.backends.embed_url = url.clone();
            self.backends.segment_url = url;
        }
        for (key, slot) in [
            (ENV_CHAT_URL, &mut self.backends.chat_url),
            (ENV_EMBED_URL, &mut self.backends.embed_url),
            (ENV_SEGMENT_URL, &mut self.backends.segment_url),
        ] {
            if let Some(url) = var(key) {
                *slot = url;
            }
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.parallelism == 0 {
            return Err(UsageError("parallelism must be at least 1".into()).into());
        }
        if self.backends.retry_attempts == 0 {
            return Err(UsageError("retry_attempts must be at least 1".into()).into());
        }
        self.chain.validate()?;
        Ok(())
    }

    pub fn rule_set(&self) -> anyhow::Result<RuleSet> {
        match &self.rule_set {
            Some(path) => Ok(load_rule_set(path)?),
            None => Ok(RuleSet::builtin()),
        }
    }
}
