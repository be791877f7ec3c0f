//! Training, evaluation, load analytics, FLOPs accounting and gradient
//! checks, plus the run configuration shared by the command-line tool.

mod analysis;
mod flops;
mod gradcheck;
mod optim;
mod train;

pub use analysis::{
    analyze_load, evaluate, hard_weight_sweep, sweep_argmin, Condition, EvalRow, LoadReport, LoadRow, SweepRow,
    DEFAULT_SWEEP_GRID,
};
pub use flops::{flops, FlopsReport};
pub use gradcheck::{gradcheck, gradcheck_config, StrategyCheck};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use train::{
    load_run, metrics_header, read_metrics, train, write_metrics, StepMetrics, TrainOutcome, CHECKPOINT_FILE,
    CONFIG_FILE, LOAD_REPORT_FILE, METRICS_FILE,
};

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{join_key, parse_kv, parse_list, parse_value, render_kv, render_list, KvConfig};
use crate::error::{cfg_err, Error, Result};
use crate::losses::{LossWeights, ZLossScope};
use crate::model::ModelConfig;
use crate::synthdata::{NoisePlan, TaskConfig, SNR_GRID_DB};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub z_scope: ZLossScope,
    /// Fraction of training sequences that receive random audio noise.
    pub noisy_fraction: f64,
    pub noise_mean_db: f64,
    pub noise_std_db: f64,
    pub snr_grid: Vec<f64>,
    /// Sequences per evaluation cell.
    pub eval_sequences: usize,
    /// Seed of the data and dropout streams.
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            z_scope: ZLossScope::default(),
            noisy_fraction: 0.25,
            noise_mean_db: 0.0,
            noise_std_db: 5.0,
            snr_grid: SNR_GRID_DB.to_vec(),
            eval_sequences: 256,
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_sequences == 0 {
            return Err(cfg_err!("batch_size and eval_sequences must be positive"));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(cfg_err!("optimizer rates must be positive with betas in [0, 1)"));
        }
        let w = &self.weights;
        if ![w.c_b, w.c_s, w.c_z].iter().all(|c| c.is_finite() && *c >= 0.0) {
            return Err(cfg_err!("loss weights must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.noisy_fraction) || !(self.noise_std_db >= 0.0) {
            return Err(cfg_err!("noisy_fraction must lie in [0, 1] and noise_std_db be non-negative"));
        }
        Ok(())
    }

    pub fn noise_plan(&self) -> NoisePlan {
        NoisePlan::Mixed {
            fraction: self.noisy_fraction,
            mean_db: self.noise_mean_db,
            std_db: self.noise_std_db,
        }
    }
}

impl KvConfig for TrainConfig {
    fn to_kv(&self, prefix: &str) -> Vec<(String, String)> {
        let k = |s: &str| join_key(prefix, s);
        vec![
            (k("steps"), self.steps.to_string()),
            (k("batch_size"), self.batch_size.to_string()),
            (k("lr"), self.adam.lr.to_string()),
            (k("beta1"), self.adam.beta1.to_string()),
            (k("beta2"), self.adam.beta2.to_string()),
            (k("eps"), self.adam.eps.to_string()),
            (k("c_b"), self.weights.c_b.to_string()),
            (k("c_s"), self.weights.c_s.to_string()),
            (k("c_z"), self.weights.c_z.to_string()),
            (k("z_expert_routers"), self.z_scope.expert_routers.to_string()),
            (k("z_group_router"), self.z_scope.group_router.to_string()),
            (k("noisy_fraction"), self.noisy_fraction.to_string()),
            (k("noise_mean_db"), self.noise_mean_db.to_string()),
            (k("noise_std_db"), self.noise_std_db.to_string()),
            (k("snr_grid"), render_list(&self.snr_grid)),
            (k("eval_sequences"), self.eval_sequences.to_string()),
            (k("seed"), self.seed.to_string()),
            (k("out_dir"), self.out_dir.display().to_string()),
        ]
    }

    fn set_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.adam.lr = parse_value(key, value)?,
            "beta1" => self.adam.beta1 = parse_value(key, value)?,
            "beta2" => self.adam.beta2 = parse_value(key, value)?,
            "eps" => self.adam.eps = parse_value(key, value)?,
            "c_b" => self.weights.c_b = parse_value(key, value)?,
            "c_s" => self.weights.c_s = parse_value(key, value)?,
            "c_z" => self.weights.c_z = parse_value(key, value)?,
            "z_expert_routers" => self.z_scope.expert_routers = parse_value(key, value)?,
            "z_group_router" => self.z_scope.group_router = parse_value(key, value)?,
            "noisy_fraction" => self.noisy_fraction = parse_value(key, value)?,
            "noise_mean_db" => self.noise_mean_db = parse_value(key, value)?,
            "noise_std_db" => self.noise_std_db = parse_value(key, value)?,
            "snr_grid" => self.snr_grid = parse_list(key, value)?,
            "eval_sequences" => self.eval_sequences = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(cfg_err!("unknown train key `{key}`")),
        }
        Ok(())
    }
}

/// Model, task and training sections of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Sets `section.key`. Task sizes shared with the model (`vocab_size`,
    /// `d_audio`, `d_video`) are copied into the model section.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, rest) = key
            .split_once('.')
            .ok_or_else(|| cfg_err!("key `{key}` lacks a section (model., task. or train.)"))?;
        match section {
            "model" => self.model.set_kv(rest, value),
            "task" => {
                self.task.set_kv(rest, value)?;
                match rest {
                    "vocab_size" | "d_audio" | "d_video" => self.model.set_kv(rest, value),
                    _ => Ok(()),
                }
            }
            "train" => self.train.set_kv(rest, value),
            _ => Err(cfg_err!("unknown section `{section}` in `{key}`")),
        }
    }

    /// Applies `key=value` assignments in order.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = self.model.to_kv("model");
        kv.extend(self.task.to_kv("task"));
        kv.extend(self.train.to_kv("train"));
        kv
    }

    pub fn to_text(&self) -> String {
        render_kv(&self.to_kv())
    }

    /// Configuration after replacing the model and data seeds.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.model.seed = seed;
        c.train.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        let (m, t) = (&self.model, &self.task);
        if m.vocab_size != t.vocab_size || m.d_audio != t.d_audio || m.d_video != t.d_video {
            return Err(cfg_err!(
                "model sizes (V {}, d_a {}, d_v {}) disagree with the task (V {}, d_a {}, d_v {})",
                m.vocab_size,
                m.d_audio,
                m.d_video,
                t.vocab_size,
                t.d_audio,
                t.d_video
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply([
            ("model.moe.strategy", "hard"),
            ("task.vocab_size", "16"),
            ("task.n_clusters", "4"),
            ("task.snr_db", "-5"),
            ("train.snr_grid", "-10,10"),
            ("train.c_s", "0"),
        ])
        .unwrap();
        assert_eq!(cfg.model.vocab_size, 16);
        cfg.validate().unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn rejects_unknown_keys_and_mismatches() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("train.nope", "1").is_err());
        assert!(cfg.set("steps", "1").is_err());
        assert!(cfg.set("other.steps", "1").is_err());
        cfg.set("model.vocab_size", "12").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }
}
