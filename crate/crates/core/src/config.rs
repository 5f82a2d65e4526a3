//! Run configuration shared by every CLI subcommand.
//!
//! One JSON file holds a section per pipeline stage. Missing sections and keys
//! take their defaults; unknown keys are rejected. A global `seed`, when set,
//! replaces the seed of every section.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::SyntheticWorldConfig;
use crate::dlrm::{DlrmConfig, LumUsage};
use crate::lum::LumConfig;
use crate::{LumError, Result};

/// Stable artifact names under the output directory.
pub mod files {
    pub const CORPUS_DIR: &str = "corpus";
    pub const LUM_CHECKPOINT: &str = "lum.ckpt";
    pub const TRAIN_REPORT: &str = "train_report.jsonl";
    pub const QUERY_RESULTS: &str = "query_results.jsonl";
    pub const INTEREST_LOG: &str = "interests.jsonl";
    pub const ITEM_EMBEDDINGS: &str = "item_embeddings.json";
    pub const CACHE: &str = "interest_cache.jsonl";
    pub const RANKER: &str = "ranker.ckpt";
    pub const RETRIEVAL: &str = "retrieval.ckpt";
    pub const DLRM_METRICS: &str = "dlrm_metrics.json";
    pub const EVAL_REPORT: &str = "eval.json";
    pub const SCALING_REPORT: &str = "scaling.json";
    pub const SCALING_PLOT: &str = "scaling_plot.csv";
    pub const SCALING_LENGTHS_PLOT: &str = "scaling_lengths_plot.csv";
    pub const BENCH_PACKING: &str = "bench_packing.json";
    pub const BENCH_GROUP_QUERY: &str = "bench_group_query.json";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Where every artifact is written and read back.
    pub out: PathBuf,
    /// Interactions CSV to ingest instead of generating a synthetic world.
    pub interactions_csv: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            interactions_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryConfig {
    /// Items kept per result.
    pub top_k: usize,
    /// Users to query; empty means every user.
    pub users: Vec<u32>,
    /// Scenarios to query; empty means every known scenario.
    pub scenarios: Vec<u32>,
    pub cache_capacity: Option<usize>,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            users: Vec::new(),
            scenarios: Vec::new(),
            cache_capacity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub model: DlrmConfig,
    /// Events per user, before the held-out one, used to train the DLRM.
    pub train_events: usize,
    pub lum_usage: LumUsage,
    pub recall_k: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            model: DlrmConfig::default(),
            train_events: 5,
            lum_usage: LumUsage::DirectAndMatching,
            recall_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Model widths; each runs with field dims of half the width and an MLP
    /// twice as wide.
    pub model_dims: Vec<usize>,
    /// Sequence budgets, swept at the base LUM width.
    pub sequence_lengths: Vec<usize>,
    /// Events per user held out for R@K.
    pub holdout_events: usize,
    pub k: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            model_dims: vec![4, 8, 16, 32],
            sequence_lengths: Vec::new(),
            holdout_events: 4,
            k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub skewed_users: usize,
    pub max_tokens: usize,
    pub prefix_tokens: usize,
    pub group_queries: usize,
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            skewed_users: 64,
            max_tokens: 256,
            prefix_tokens: 256,
            group_queries: 8,
            warmup: 1,
            repetitions: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub datagen: SyntheticWorldConfig,
    pub lum: LumConfig,
    pub query: QueryConfig,
    pub dlrm: DownstreamConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            paths: PathsConfig::default(),
            datagen: SyntheticWorldConfig::default(),
            lum: LumConfig {
                epochs: 15,
                ..LumConfig::tiny()
            },
            query: QueryConfig::default(),
            dlrm: DownstreamConfig::default(),
            sweep: SweepConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LumError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            LumError::InvalidConfig(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    /// Copies the global seed, if any, into every section.
    pub fn resolve_seed(&mut self) {
        if let Some(s) = self.seed {
            self.datagen.rng_seed = s;
            self.lum.seed = s;
            self.dlrm.model.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.datagen.validate()?;
        self.lum.validate()?;
        self.dlrm.model.validate()?;
        if self.paths.out.as_os_str().is_empty() {
            return Err(LumError::InvalidConfig("paths.out is empty".into()));
        }
        if self.paths.out.is_file() {
            return Err(LumError::InvalidConfig(format!(
                "paths.out {} is a file, expected a directory",
                self.paths.out.display()
            )));
        }
        if let Some(p) = &self.paths.interactions_csv {
            if !p.is_file() {
                return Err(LumError::InvalidConfig(format!(
                    "paths.interactions_csv {} does not exist",
                    p.display()
                )));
            }
        }
        let positive = [
            ("query.top_k", self.query.top_k),
            ("dlrm.train_events", self.dlrm.train_events),
            ("dlrm.recall_k", self.dlrm.recall_k),
            ("sweep.holdout_events", self.sweep.holdout_events),
            ("sweep.k", self.sweep.k),
            ("bench.repetitions", self.bench.repetitions),
            ("bench.group_queries", self.bench.group_queries),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(LumError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.query.cache_capacity == Some(0) {
            return Err(LumError::InvalidConfig(
                "query.cache_capacity must be >= 1 when set".into(),
            ));
        }
        if let Some(&d) = self.sweep.model_dims.iter().find(|&&d| d < 2 || d % 2 != 0) {
            return Err(LumError::InvalidConfig(format!(
                "sweep model dim {d} must be even and >= 2"
            )));
        }
        if let Some(&n) = self
            .sweep
            .sequence_lengths
            .iter()
            .find(|&&n| n < 2 || n % 2 != 0)
        {
            return Err(LumError::InvalidConfig(format!(
                "sweep sequence length {n} must be even and >= 2"
            )));
        }
        if self.bench.max_tokens < 4 || self.bench.max_tokens % 2 != 0 {
            return Err(LumError::InvalidConfig(
                "bench.max_tokens must be even and >= 4".into(),
            ));
        }
        Ok(())
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.paths.out.join(name)
    }
}
