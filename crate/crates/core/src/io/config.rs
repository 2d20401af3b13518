use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, TrainConfig};
use crate::matching::{RansacConfig, SamplerMode};
use crate::metrics::EvalThresholds;
use crate::model::{Model, ModelConfig};
use crate::synth::GenConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_pairs: usize,
    pub eval_pairs: usize,
    /// Per-pair completeness drawn uniformly from `[lo, hi]`; `None` uses
    /// `gen.p_v` for every pair.
    pub p_v_range: Option<(f64, f64)>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { train_pairs: 500, eval_pairs: 100, p_v_range: Some((0.5, 0.8)) }
    }
}

/// File names inside a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub metrics_csv: PathBuf,
    pub overlap_csv: PathBuf,
    pub ecdf_csv: PathBuf,
    pub summary_json: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint: "model.ckpt".into(),
            train_log: "train_log.jsonl".into(),
            metrics_csv: "metrics.csv".into(),
            overlap_csv: "overlap.csv".into(),
            ecdf_csv: "overlap_ecdf.csv".into(),
            summary_json: "summary.json".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub sampler: SamplerMode,
    pub ransac: RansacConfig,
    pub eval: EvalThresholds,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.gen.validate().map_err(cfg_err)?;
        Model::new(self.model.clone()).map_err(cfg_err)?;
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if let Some((lo, hi)) = self.dataset.p_v_range {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("p_v_range ({lo}, {hi}) must satisfy 0 < lo ≤ hi ≤ 1")));
            }
            let cropped = (self.gen.n_full as f64 * lo).floor() as usize;
            if self.gen.n_keep > cropped {
                return Err(Error::Config(format!("n_keep {} exceeds the {cropped} points kept at p_v = {lo}", self.gen.n_keep)));
            }
        }
        if self.sampler.k == 0 {
            return Err(Error::Config("sampler.k must be positive".into()));
        }
        if self.ransac.iterations == 0 || !(self.ransac.inlier_threshold > 0.0) {
            return Err(Error::Config("ransac needs iterations > 0 and a positive threshold".into()));
        }
        Ok(())
    }

    /// Sets every seed in the configuration to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.gen.seed = seed;
        self.train.seed = seed;
        self.sampler.seed = seed;
        self.ransac.seed = seed;
        self
    }
}
