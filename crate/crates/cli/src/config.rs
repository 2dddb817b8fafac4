//! Run configuration: a TOML file, then `RECON_SEED`, then command-line
//! flags, each overriding the previous layer.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use recon_core::rl::toy::ToyTrainConfig;
use recon_core::rl::PpoConfig;
use recon_core::relevance::RelevanceTrainConfig;
use recon_core::RolloutConfig;

pub const SEED_ENV: &str = "RECON_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Line-delimited `{id, title, text}` passages.
    pub corpus: Option<PathBuf>,
    /// Saved index built by `recon ingest`.
    pub index: Option<PathBuf>,
    /// `{question, golden_answers}` lines.
    pub qa: Option<PathBuf>,
    /// Trajectory log written by `rollout`, read by `eval` and `build-distill`.
    pub logs: Option<PathBuf>,
    /// Directory for reports and training artifacts.
    pub reports: Option<PathBuf>,
    /// Append-only record of every invocation.
    pub runs_log: Option<PathBuf>,
}

/// Optional remote backends. Anything left unset runs in-process.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoints {
    pub policy: Option<String>,
    pub summarizer: Option<String>,
    pub retriever: Option<String>,
    pub teacher: Option<String>,
    /// Per-request timeout in seconds.
    pub timeout_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub iterations: usize,
    pub batch_size: usize,
    pub mini_batch_size: usize,
    pub n_facts: usize,
    pub sentence_budget: usize,
    pub eval_samples: usize,
}

impl Default for ToySection {
    fn default() -> Self {
        let d = ToyTrainConfig::default();
        Self {
            iterations: d.iterations,
            batch_size: d.batch_size,
            mini_batch_size: d.mini_batch_size,
            n_facts: d.n_facts,
            sentence_budget: d.sentence_budget,
            eval_samples: d.eval_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelevanceSection {
    pub lr: f64,
    pub epochs: usize,
    pub feature_dim: usize,
}

impl Default for RelevanceSection {
    fn default() -> Self {
        let d = RelevanceTrainConfig::default();
        Self {
            lr: d.lr,
            epochs: d.epochs,
            feature_dim: d.feature_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Sentences kept per information block by the in-process condenser.
    pub sentence_budget: usize,
    pub paths: Paths,
    pub rollout: RolloutConfig,
    pub ppo: PpoConfig,
    pub endpoints: Endpoints,
    pub toy: ToySection,
    pub relevance: RelevanceSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            sentence_budget: 2,
            paths: Paths::default(),
            rollout: RolloutConfig::default(),
            ppo: PpoConfig::default(),
            endpoints: Endpoints {
                timeout_s: 60,
                ..Endpoints::default()
            },
            toy: ToySection::default(),
            relevance: RelevanceSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Ok(raw) = std::env::var(SEED_ENV) {
            config.seed = raw
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={raw:?} is not an unsigned integer"))?;
        }
        Ok(config)
    }

    pub fn toy_config(&self) -> ToyTrainConfig {
        ToyTrainConfig {
            ppo: PpoConfig {
                seed: self.seed,
                ..self.ppo
            },
            rollout: self.rollout.clone(),
            iterations: self.toy.iterations,
            batch_size: self.toy.batch_size,
            mini_batch_size: self.toy.mini_batch_size,
            sentence_budget: self.toy.sentence_budget,
            n_facts: self.toy.n_facts,
            eval_samples: self.toy.eval_samples,
        }
    }

    pub fn relevance_config(&self) -> RelevanceTrainConfig {
        RelevanceTrainConfig {
            lr: self.relevance.lr,
            epochs: self.relevance.epochs,
            seed: self.seed,
            feature_dim: self.relevance.feature_dim,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
