//! End-to-end steps driven by a [`RunConfig`]: data, teacher, student,
//! sampling and evaluation. Shared by the command-line driver and the
//! acceptance suite.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::config::RunConfig;
use crate::distill::{train_distill, DistillConfig, DistillState};
use crate::error::{Error, Result};
use crate::metrics::{sliced_w2_with, MetricReport};
use crate::net::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelKind};
use crate::net::VelocityNet;
use crate::par::Exec;
use crate::sampler::{
    default_schedule, multistep_sample, score_schedule, search_timesteps, write_score_table, SearchResult, SearchSpec, StepSchedule,
};
use crate::teacher::{euler_sample_fm, train_teacher, write_loss_curve, Guided, TeacherRun};
use crate::toydata::{generate_from, Dataset};
use crate::trigflow::TrigFlowAdapter;
use crate::rng_from_seed;

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";

pub fn training_data(cfg: &RunConfig) -> Result<Dataset> {
    generate_from(&cfg.dataset, cfg.n_data, cfg.seeds.data)
}

/// Held-out reference set for metrics.
pub fn reference_data(cfg: &RunConfig, n: usize) -> Result<Dataset> {
    generate_from(&cfg.dataset, n, cfg.seeds.eval_data)
}

/// Train a teacher; with `out`, writes `teacher.ckpt` and `teacher_loss.csv`.
pub fn pretrain(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<TeacherRun> {
    let net = VelocityNet::new(cfg.net.clone(), &mut rng_from_seed(cfg.seeds.teacher_init))?;
    let run = train_teacher(net, data, &cfg.teacher, &mut rng_from_seed(cfg.seeds.teacher_train))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let meta = CheckpointMeta { kind: ModelKind::Teacher, sigma_d: Some(data.sigma_d), iters: cfg.teacher.iters };
        save_checkpoint(&run.net, &meta, &dir.join(TEACHER_CKPT))?;
        write_loss_curve(&dir.join("teacher_loss.csv"), &run.curve)?;
    }
    Ok(run)
}

/// Distill with the given settings; with `out`, writes `student.ckpt` and
/// `distill_metrics.csv`.
pub fn distill(
    cfg: &RunConfig,
    dcfg: &DistillConfig,
    teacher: VelocityNet,
    data: &Dataset,
    out: Option<&Path>,
) -> Result<DistillState> {
    let mut state = DistillState::new(teacher, data.sigma_d, dcfg, &mut rng_from_seed(cfg.seeds.distill_init))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    train_distill(&mut state, data, &mut rng_from_seed(cfg.seeds.distill_train), out)?;
    if let Some(dir) = out {
        state.save_student(&dir.join(STUDENT_CKPT))?;
    }
    Ok(state)
}

/// Load a checkpoint and its data scale, requiring the given kind when set.
pub fn load_model(path: &Path, want: Option<ModelKind>) -> Result<(VelocityNet, CheckpointMeta, f64)> {
    let (net, meta) = load_checkpoint(path)?;
    if let Some(kind) = want {
        if meta.kind != kind {
            return Err(Error::Checkpoint(format!("{}: expected a {kind:?} checkpoint, found {:?}", path.display(), meta.kind)));
        }
    }
    let sigma_d = meta
        .sigma_d
        .ok_or_else(|| Error::Checkpoint(format!("{}: checkpoint does not record sigma_d", path.display())))?;
    Ok((net, meta, sigma_d))
}

/// The configured schedule, or the default one for `steps`.
pub fn schedule_for(cfg: &RunConfig, steps: usize, sigma_d: f64) -> Result<StepSchedule> {
    match &cfg.sampling.schedule {
        Some(s) if s.steps() == steps => Ok(s.clone()),
        _ => default_schedule(steps, sigma_d),
    }
}

/// Few-step student samples for `labels`.
pub fn sample_student(
    student: &VelocityNet,
    sigma_d: f64,
    sched: &StepSchedule,
    labels: &[usize],
    cfg_scale: f64,
    seed: u64,
    exec: Exec,
) -> Result<Array2<f64>> {
    let adapter = TrigFlowAdapter::new(student, sigma_d)?;
    multistep_sample(&adapter, sched, labels, cfg_scale, &mut rng_from_seed(seed), exec)
}

/// Guided flow-matching Euler samples from the teacher.
pub fn sample_teacher(
    teacher: &VelocityNet,
    sigma_d: f64,
    steps: usize,
    labels: &[usize],
    cfg_scale: f64,
    seed: u64,
    exec: Exec,
) -> Result<Array2<f64>> {
    euler_sample_fm(&Guided(teacher), labels.len(), steps, labels, cfg_scale, sigma_d, &mut rng_from_seed(seed), exec)
}

pub fn evaluate(cfg: &RunConfig, samples: &Array2<f64>, reference: &Dataset, exec: Exec) -> Result<MetricReport> {
    MetricReport::compute(samples, &reference.points_array(), &cfg.eval.metric, cfg.seeds.metric, exec)
}

/// Sliced W2 against `reference` with the configured projections.
pub fn sliced_w2_to(cfg: &RunConfig, samples: &Array2<f64>, reference: &Array2<f64>, exec: Exec) -> Result<f64> {
    sliced_w2_with(samples.view(), reference.view(), cfg.eval.metric.n_proj, cfg.seeds.metric, exec)
}

fn search_setup(cfg: &RunConfig, exec: Exec) -> Result<(Dataset, SearchSpec)> {
    let reference = reference_data(cfg, cfg.search.n_eval)?;
    let spec = SearchSpec {
        steps: cfg.search.steps,
        n_grid: cfg.search.n_grid.clone(),
        grid: cfg.search.grid.clone(),
        cfg: cfg.sampling.cfg_scale,
        eval_seed: cfg.seeds.sample,
        exec,
    };
    Ok((reference, spec))
}

/// Timestep search on a student against a held-out reference set; with
/// `out`, writes `search_scores.csv` and `schedule.json`.
pub fn search(cfg: &RunConfig, student: &VelocityNet, sigma_d: f64, out: Option<&Path>, exec: Exec) -> Result<SearchResult> {
    let (reference, spec) = search_setup(cfg, exec)?;
    let ref_points = reference.points_array();
    let adapter = TrigFlowAdapter::new(student, sigma_d)?;
    let metric = |x: &Array2<f64>| sliced_w2_to(cfg, x, &ref_points, Exec::Sequential);
    let result = search_timesteps(&adapter, metric, &reference.labels, &spec)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_score_table(&dir.join("search_scores.csv"), &result.table)?;
        fs::write(dir.join("schedule.json"), serde_json::to_string_pretty(&result.schedule)?)?;
    }
    Ok(result)
}

/// Metric of one schedule under the same reference set and evaluation noise
/// that [`search`] uses.
pub fn search_score(cfg: &RunConfig, student: &VelocityNet, sigma_d: f64, sched: &StepSchedule) -> Result<f64> {
    let (reference, spec) = search_setup(cfg, Exec::Sequential)?;
    let ref_points = reference.points_array();
    let adapter = TrigFlowAdapter::new(student, sigma_d)?;
    let metric = |x: &Array2<f64>| sliced_w2_to(cfg, x, &ref_points, Exec::Sequential);
    score_schedule(&adapter, sched, &reference.labels, &metric, &spec)
}
