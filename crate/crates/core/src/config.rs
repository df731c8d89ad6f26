//! Run configuration: one JSON document per run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::net::NetConfig;
use crate::sampler::StepSchedule;
use crate::teacher::TeacherConfig;
use crate::toydata::DatasetSpec;

/// Few-step and reference sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Student step count, one of 1, 2, 4.
    pub steps: usize,
    /// Overrides the default schedule for `steps` when set.
    pub schedule: Option<StepSchedule>,
    pub cfg_scale: f64,
    pub n_samples: usize,
    /// Teacher Euler steps for the reference samples.
    pub euler_steps: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { steps: 2, schedule: None, cfg_scale: 4.5, n_samples: 2000, euler_steps: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Size of the held-out reference set.
    pub n_eval: usize,
    pub metric: MetricConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_eval: 2000, metric: MetricConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub steps: usize,
    pub n_grid: Vec<f64>,
    pub grid: Vec<f64>,
    pub n_eval: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            steps: 2,
            n_grid: vec![50.0, 100.0, 200.0, 400.0],
            grid: (1..=15).map(|i| i as f64 / 10.0).collect(),
            n_eval: 1000,
        }
    }
}

/// Seeds for every random stream of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub data: u64,
    pub eval_data: u64,
    pub teacher_init: u64,
    pub teacher_train: u64,
    pub distill_init: u64,
    pub distill_train: u64,
    pub sample: u64,
    pub metric: u64,
}

impl Seeds {
    /// Distinct streams derived from one base seed.
    pub fn from_base(base: u64) -> Self {
        let s = |k: u64| base.wrapping_mul(1000).wrapping_add(k);
        Seeds {
            data: s(0),
            eval_data: s(1),
            teacher_init: s(2),
            teacher_train: s(3),
            distill_init: s(4),
            distill_train: s(5),
            sample: s(6),
            metric: s(7),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::from_base(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub n_data: usize,
    pub net: NetConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
    pub search: SearchConfig,
    pub seeds: Seeds,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetSpec::default(),
            n_data: 20_000,
            net: NetConfig::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            sampling: SamplingConfig::default(),
            eval: EvalConfig::default(),
            search: SearchConfig::default(),
            seeds: Seeds::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.teacher.validate()?;
        self.distill.validate()?;
        if self.net.num_classes != self.dataset.num_classes() {
            return Err(Error::Config(format!(
                "net.num_classes is {} but the dataset has {} classes",
                self.net.num_classes,
                self.dataset.num_classes()
            )));
        }
        if self.n_data < 2 || self.eval.n_eval < 2 || self.sampling.n_samples < 2 || self.search.n_eval < 2 {
            return Err(Error::Config("data, sample and eval sizes must be >= 2".into()));
        }
        if ![1, 2, 4].contains(&self.sampling.steps) && self.sampling.schedule.is_none() {
            return Err(Error::Config(format!("sampling.steps must be 1, 2 or 4, got {}", self.sampling.steps)));
        }
        if self.sampling.euler_steps == 0 || self.search.steps == 0 {
            return Err(Error::Config("step counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Read and validate a config file; any failure is a configuration error
    /// naming the path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
