use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::TokenType;
use crate::fewshot::{DEFAULT_TRIALS, STANDARD_K, QUERY_NEGATIVES, QUERY_POSITIVES};
use crate::par::Execution;
use crate::pools::{PoolOptions, Task};
use crate::templates::{Rule, TrainConfig};

fn default_k_list() -> Vec<usize> {
    STANDARD_K.to_vec()
}

fn default_trials() -> usize {
    DEFAULT_TRIALS
}

fn default_cap_ratio() -> f64 {
    PoolOptions::DEFAULT_CAP_RATIO
}

fn default_query_pos() -> usize {
    QUERY_POSITIVES
}

fn default_query_neg() -> usize {
    QUERY_NEGATIVES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    pub task: Task,
    pub rule: Rule,
    pub token_types: Vec<TokenType>,
    pub model_tags: Vec<String>,
    /// Concepts to probe; all labels of the task's categories when absent.
    #[serde(default)]
    pub concepts: Option<Vec<u32>>,
    #[serde(default = "default_k_list")]
    pub k_list: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_cap_ratio")]
    pub cap_ratio: f64,
    /// Overrides the task default (on for segmentation, off for classification).
    #[serde(default)]
    pub category_restrict: Option<bool>,
    #[serde(default = "default_query_pos")]
    pub query_positives: usize,
    #[serde(default = "default_query_neg")]
    pub query_negatives: usize,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub execution: Execution,
}

impl ExperimentConfig {
    pub fn new(
        manifest: impl Into<PathBuf>,
        task: Task,
        rule: Rule,
        token_types: Vec<TokenType>,
        model_tags: Vec<String>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            manifest: manifest.into(),
            task,
            rule,
            token_types,
            model_tags,
            concepts: None,
            k_list: default_k_list(),
            trials: DEFAULT_TRIALS,
            master_seed: 0,
            train: TrainConfig::default(),
            cap_ratio: PoolOptions::DEFAULT_CAP_RATIO,
            category_restrict: None,
            query_positives: QUERY_POSITIVES,
            query_negatives: QUERY_NEGATIVES,
            output_dir: output_dir.into(),
            workers: 0,
            execution: Execution::default(),
        }
    }

    /// Parse a config file. Relative paths inside resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.manifest.is_relative() {
            cfg.manifest = base.join(&cfg.manifest);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.token_types.is_empty() {
            return bad("token_types is empty");
        }
        if self.model_tags.is_empty() {
            return bad("model_tags is empty");
        }
        if self.rule == Rule::Cosine {
            if self.k_list.is_empty() {
                return bad("cosine rule needs a nonempty k_list");
            }
            if self.k_list.contains(&0) {
                return bad("k values must be positive");
            }
            if self.trials == 0 {
                return bad("trials must be positive");
            }
            if self.query_positives == 0 || self.query_negatives == 0 {
                return bad("query sizes must be positive");
            }
        }
        if self.cap_ratio.is_nan() || self.cap_ratio <= 0.0 {
            return bad("cap_ratio must be positive");
        }
        self.train.validate()
    }

    pub fn pool_options(&self) -> PoolOptions {
        let mut opts = PoolOptions::for_task(self.task);
        opts.cap_ratio = self.cap_ratio;
        if let Some(r) = self.category_restrict {
            opts.category_restrict = r;
        }
        opts
    }
}
