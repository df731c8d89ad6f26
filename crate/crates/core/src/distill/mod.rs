//! Hybrid distillation: continuous-time consistency loss with forward-mode
//! tangents, plus a hinge adversarial loss whose discriminator reads frozen
//! teacher features through small trainable heads.

mod heads;
mod loss;
mod state;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::TimestepDistribution;

pub use heads::{AdaptiveWeight, DiscriminatorHeads};
pub use loss::{
    disc_hinge, discriminator_eval, generator_eval, scm_tangent, trig_noise, DiscOutput, Draws, GenOutput, GenParts,
    StopGrad, Tangent,
};
pub use state::{distill_step, train_distill, DistillState};

/// Which generator terms are active.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    #[default]
    Hybrid,
    ScmOnly,
    GanOnly,
}

impl LossMode {
    pub fn uses_scm(self) -> bool {
        self != LossMode::GanOnly
    }

    pub fn uses_adv(self) -> bool {
        self != LossMode::ScmOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub lr: f64,
    pub iters: u64,
    pub batch: usize,
    pub lambda_adv: f64,
    pub warmup_h: u64,
    pub tangent_c: f64,
    /// Its `sigma_d` is replaced by the data's when a state is built.
    pub gen_tdist: TimestepDistribution,
    pub disc_tdist: TimestepDistribution,
    pub cfg_scales: Vec<f64>,
    pub mode: LossMode,
    pub head_hidden: usize,
    pub wphi_hidden: usize,
    pub wphi_freqs: usize,
    /// Save a student checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lr: 1e-4,
            iters: 4000,
            batch: 64,
            lambda_adv: 0.5,
            warmup_h: 1000,
            tangent_c: 0.1,
            gen_tdist: TimestepDistribution::generator(0.5),
            disc_tdist: TimestepDistribution::discriminator(0.5),
            cfg_scales: vec![4.0, 4.5, 5.0],
            mode: LossMode::Hybrid,
            head_hidden: 64,
            wphi_hidden: 32,
            wphi_freqs: 8,
            checkpoint_every: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("distill lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::Config(format!("lambda_adv must be >= 0, got {}", self.lambda_adv)));
        }
        if self.warmup_h == 0 {
            return Err(Error::Config("warmup_h must be >= 1".into()));
        }
        if !(self.tangent_c > 0.0) {
            return Err(Error::Config(format!("tangent_c must be positive, got {}", self.tangent_c)));
        }
        if self.cfg_scales.is_empty() {
            return Err(Error::Config("cfg_scales must be nonempty".into()));
        }
        if self.batch == 0 || self.head_hidden == 0 || self.wphi_hidden == 0 || self.wphi_freqs == 0 {
            return Err(Error::Config("distill batch and head sizes must be >= 1".into()));
        }
        self.gen_tdist.validate()?;
        self.disc_tdist.validate()
    }

    /// Copy with both timestep distributions bound to `sigma_d`.
    pub fn bound_to(&self, sigma_d: f64) -> Self {
        let mut c = self.clone();
        c.gen_tdist.sigma_d = sigma_d;
        c.disc_tdist.sigma_d = sigma_d;
        c
    }
}

/// Tangent warmup ratio `min(1, iters_done / H)`.
pub fn warmup_ratio(iters_done: u64, warmup_h: u64) -> f64 {
    (iters_done as f64 / warmup_h.max(1) as f64).min(1.0)
}

/// One row of the per-step metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iter: u64,
    pub scm_loss: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub grad_norm: f64,
    pub r: f64,
    pub t_mean: f64,
}

/// Write rows as `iter,scm_loss,adv_g,adv_d,grad_norm,r,t_mean`.
pub fn write_metrics_csv(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["iter", "scm_loss", "adv_g", "adv_d", "grad_norm", "r", "t_mean"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
