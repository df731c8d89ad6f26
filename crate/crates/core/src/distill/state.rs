use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;

use super::heads::{AdaptiveWeight, DiscriminatorHeads};
use super::loss::{discriminator_eval, generator_eval, Draws, GenOutput, GenParts, StopGrad};
use super::{warmup_ratio, write_metrics_csv, DistillConfig, StepMetrics};
use crate::error::{Error, Result};
use crate::net::checkpoint::{save_checkpoint, CheckpointMeta, ModelKind};
use crate::net::VelocityNet;
use crate::optim::{l2_norm, Adam, AdamConfig};
use crate::toydata::{Batch, Dataset};
use crate::trigflow::TrigFlowAdapter;

/// Student, frozen teacher, discriminator heads and adaptive weight, plus
/// their optimisers. The stop-gradient student is the student itself, read
/// through [`StopGrad`].
#[derive(Debug, Clone)]
pub struct DistillState {
    teacher: VelocityNet,
    pub student: VelocityNet,
    pub heads: DiscriminatorHeads,
    pub wphi: AdaptiveWeight,
    pub sigma_d: f64,
    /// Counter advanced once per discriminator and once per generator update.
    pub iters_done: u64,
    /// Completed calls to [`distill_step`].
    pub steps_done: u64,
    cfg: DistillConfig,
    opt_student: Adam,
    opt_wphi: Adam,
    opt_heads: Vec<Adam>,
}

fn diverged(iter: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric(what) => Error::Divergence { iter, what },
        other => other,
    }
}

impl DistillState {
    /// Student and discriminator backbone both start from the teacher.
    pub fn new<R: Rng + ?Sized>(teacher: VelocityNet, sigma_d: f64, cfg: &DistillConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if !(sigma_d > 0.0 && sigma_d.is_finite()) {
            return Err(Error::Config(format!("sigma_d must be positive, got {sigma_d}")));
        }
        let cfg = cfg.bound_to(sigma_d);
        let width = teacher.config().width;
        let heads = DiscriminatorHeads::new(teacher.config().depth, width, cfg.head_hidden, rng);
        let wphi = AdaptiveWeight::new(cfg.wphi_freqs, cfg.wphi_hidden, rng);
        let student = teacher.clone();
        let adam = AdamConfig::with_lr(cfg.lr);
        let opt_student = Adam::with_mask(adam, student.trainable_mask(&[]));
        let opt_wphi = Adam::new(adam, wphi.params().len());
        let opt_heads = (0..heads.len()).map(|k| Adam::new(adam, heads.head(k).params().len())).collect();
        Ok(DistillState {
            teacher,
            student,
            heads,
            wphi,
            sigma_d,
            iters_done: 0,
            steps_done: 0,
            cfg,
            opt_student,
            opt_wphi,
            opt_heads,
        })
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn teacher(&self) -> &VelocityNet {
        &self.teacher
    }

    pub fn student_adapter(&self) -> TrigFlowAdapter<&VelocityNet> {
        TrigFlowAdapter::new(&self.student, self.sigma_d).expect("sigma_d validated at construction")
    }

    pub fn stopgrad(&self) -> StopGrad<'_> {
        StopGrad(&self.student)
    }

    pub fn draw<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> Draws {
        Draws::draw(batch, self.sigma_d, &self.cfg, rng)
    }

    fn parts(&self) -> GenParts<'_> {
        GenParts {
            live: &self.student,
            sg: &self.student,
            teacher: &self.teacher,
            heads: &self.heads,
            wphi: &self.wphi,
            sigma_d: self.sigma_d,
        }
    }

    pub fn warmup_ratio(&self) -> f64 {
        warmup_ratio(self.iters_done, self.cfg.warmup_h)
    }

    fn eval_generator(&self, d: &Draws, cfg: &DistillConfig) -> Result<GenOutput> {
        generator_eval(&self.parts(), d, self.warmup_ratio(), cfg)
    }

    /// Consistency loss alone on fresh draws.
    pub fn scm_loss<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> Result<f64> {
        let d = self.draw(batch, rng);
        let cfg = DistillConfig { mode: super::LossMode::ScmOnly, ..self.cfg.clone() };
        Ok(self.eval_generator(&d, &cfg)?.scm_loss)
    }

    /// Generator hinge term `-sum_k mean D_k` on fresh draws.
    pub fn gen_adv_loss<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> Result<f64> {
        let d = self.draw(batch, rng);
        let cfg = DistillConfig { mode: super::LossMode::GanOnly, lambda_adv: 1.0, ..self.cfg.clone() };
        Ok(self.eval_generator(&d, &cfg)?.adv_loss)
    }

    pub fn disc_loss<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> Result<f64> {
        let d = self.draw(batch, rng);
        Ok(discriminator_eval(&self.student, &self.teacher, &self.heads, &d, self.sigma_d)?.loss)
    }

    /// One-step clean estimate from the student's consistency function.
    pub fn one_step_generate(
        &self,
        x_t: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        if t.iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("one-step generation needs t > 0".into()));
        }
        self.student_adapter().consistency_f(x_t, t, y, cfg)
    }

    /// Update the heads once; returns the discriminator loss.
    pub fn discriminator_step<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<f64> {
        let iter = self.steps_done + 1;
        let d = self.draw(batch, rng);
        let out = discriminator_eval(&self.student, &self.teacher, &self.heads, &d, self.sigma_d).map_err(diverged(iter))?;
        for (k, g) in out.grads.iter().enumerate() {
            self.opt_heads[k].step(self.heads.head_mut(k).params_mut(), g).map_err(diverged(iter))?;
        }
        self.iters_done += 1;
        Ok(out.loss)
    }

    /// Update student and adaptive weight once.
    pub fn generator_step<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<GenOutput> {
        let iter = self.steps_done + 1;
        let d = self.draw(batch, rng);
        let out = self.eval_generator(&d, &self.cfg).map_err(diverged(iter))?;
        self.opt_student.step(self.student.params_mut(), &out.grad_student).map_err(diverged(iter))?;
        self.opt_wphi.step(self.wphi.params_mut(), &out.grad_wphi).map_err(diverged(iter))?;
        if !self.student.is_finite() {
            return Err(Error::Divergence { iter, what: "non-finite student parameters".into() });
        }
        self.iters_done += 1;
        Ok(out)
    }

    pub fn save_student(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta { kind: ModelKind::Student, sigma_d: Some(self.sigma_d), iters: self.steps_done };
        save_checkpoint(&self.student, &meta, path)
    }
}

/// One discriminator update followed by one generator update. Without an
/// adversarial term the discriminator update is skipped but still counted.
pub fn distill_step<R: Rng + ?Sized>(state: &mut DistillState, batch: &Batch, rng: &mut R) -> Result<StepMetrics> {
    let adv_active = state.cfg.mode.uses_adv() && state.cfg.lambda_adv > 0.0;
    let adv_d = if adv_active {
        state.discriminator_step(batch, rng)?
    } else {
        state.iters_done += 1;
        0.0
    };
    let r = state.warmup_ratio();
    let g = state.generator_step(batch, rng)?;
    state.steps_done += 1;
    Ok(StepMetrics {
        iter: state.steps_done,
        scm_loss: g.scm_loss,
        adv_g: g.adv_loss,
        adv_d,
        grad_norm: l2_norm(&g.grad_student),
        r,
        t_mean: g.t_mean,
    })
}

/// Run `cfg.iters` steps on minibatches of `data`. With an output directory,
/// writes `distill_metrics.csv` and periodic `student_<step>.ckpt` files.
pub fn train_distill<R: Rng + ?Sized>(
    state: &mut DistillState,
    data: &Dataset,
    rng: &mut R,
    out_dir: Option<&Path>,
) -> Result<Vec<StepMetrics>> {
    let iters = state.cfg.iters;
    let batch_size = state.cfg.batch;
    let every = state.cfg.checkpoint_every;
    let mut rows = Vec::with_capacity(iters as usize);
    for _ in 0..iters {
        let batch = Batch::from_samples(&data.minibatch(batch_size, rng)?);
        rows.push(distill_step(state, &batch, rng)?);
        if let Some(dir) = out_dir {
            if every > 0 && state.steps_done % every == 0 {
                state.save_student(&dir.join(format!("student_{}.ckpt", state.steps_done)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        write_metrics_csv(&dir.join("distill_metrics.csv"), &rows)?;
    }
    Ok(rows)
}
