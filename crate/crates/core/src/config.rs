//! Run configuration loaded from TOML. Every key is optional; unknown keys
//! are rejected. Command-line flags override file values.
//!
//! ```toml
//! jobs = 4
//! seed = 0
//! datasets = ["data/mvtec", "data/visa"]
//!
//! [endpoint]
//! url = "http://localhost:8000/v1"
//! model = "qwen3-vl-8b"
//!
//! [reward]
//! alpha = 0.8
//!
//! [inference.tools]
//! clahe_clip = 2.0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::gateway::{EndpointConfig, RetryPolicy};
use crate::orchestrator::InferenceConfig;
use crate::rewards::{GrpoParams, RewardError, RewardWeights};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(#[from] RewardError),
    #[error("invalid config: {0}")]
    Other(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker-pool width for batch commands.
    pub jobs: usize,
    /// Seed for every stochastic path (balanced export sampling).
    pub seed: u64,
    /// Dataset roots, each laid out as `<category>/{train,test,ground_truth}`.
    pub datasets: Vec<PathBuf>,
    /// Prior table (JSON); none means the prior tool reports no source.
    pub priors: Option<PathBuf>,
    /// Taxonomy override (TOML); none means the built-in table.
    pub taxonomy: Option<PathBuf>,
    /// Request/response log (JSONL) with credentials redacted.
    pub request_log: Option<PathBuf>,
    pub endpoint: EndpointConfig,
    pub retry: RetryPolicy,
    pub reward: RewardWeights,
    pub grpo: GrpoParams,
    pub inference: InferenceConfig,
    pub corpus: CorpusConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            jobs: 4,
            seed: 0,
            datasets: Vec::new(),
            priors: None,
            taxonomy: None,
            request_log: None,
            endpoint: EndpointConfig::default(),
            retry: RetryPolicy::default(),
            reward: RewardWeights::default(),
            grpo: GrpoParams::default(),
            inference: InferenceConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.reward.validate()?;
        self.grpo.validate()?;
        if self.jobs == 0 {
            return Err(ConfigError::Other("jobs must be at least 1".into()));
        }
        if self.corpus.max_attempts == 0 || self.corpus.candidates == 0 {
            return Err(ConfigError::Other("corpus max_attempts and candidates must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(ConfigError::Other("retry max_attempts must be at least 1".into()));
        }
        Ok(())
    }
}
