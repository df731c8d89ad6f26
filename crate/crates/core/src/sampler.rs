//! Few-step consistency sampling and the sequential timestep search.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::par::{self, Exec};
use crate::schedule::trig_cos;
use crate::trigflow::TrigFlowAdapter;

/// Strictly decreasing TrigFlow times ending at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct StepSchedule {
    times: Vec<f64>,
}

impl StepSchedule {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Config(format!("schedule needs at least two times, got {times:?}")));
        }
        if times.last() != Some(&0.0) {
            return Err(Error::Config(format!("schedule must end at 0, got {times:?}")));
        }
        if times.iter().any(|t| !(0.0..=FRAC_PI_2).contains(t)) {
            return Err(Error::Config(format!("schedule times must lie in [0, pi/2], got {times:?}")));
        }
        if times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!("schedule must be strictly decreasing, got {times:?}")));
        }
        Ok(StepSchedule { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of consistency evaluations.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}

impl TryFrom<Vec<f64>> for StepSchedule {
    type Error = Error;

    fn try_from(times: Vec<f64>) -> Result<Self> {
        StepSchedule::new(times)
    }
}

impl From<StepSchedule> for Vec<f64> {
    fn from(s: StepSchedule) -> Self {
        s.times
    }
}

/// Reference schedules for 1, 2 and 4 steps; multi-step schedules start at
/// `arctan(200 / sigma_d)`.
pub fn default_schedule(steps: usize, sigma_d: f64) -> Result<StepSchedule> {
    if !(sigma_d > 0.0) {
        return Err(Error::Config(format!("sigma_d must be positive, got {sigma_d}")));
    }
    let t_max = (200.0 / sigma_d).atan();
    match steps {
        1 => StepSchedule::new(vec![FRAC_PI_2, 0.0]),
        2 => StepSchedule::new(vec![t_max, 1.3, 0.0]),
        4 => StepSchedule::new(vec![t_max, 1.3, 1.1, 0.6, 0.0]),
        other => Err(Error::Config(format!("unsupported step count {other}; expected 1, 2 or 4"))),
    }
}

/// Consistency sampling: start from `N(0, sigma_d^2 I)` at `times[0]`, map to
/// a clean estimate, and renoise with fresh noise to each later nonzero time.
/// All noise is drawn before evaluation, so results do not depend on `exec`.
pub fn multistep_sample<V: VelocityField, R: Rng + ?Sized>(
    student: &TrigFlowAdapter<V>,
    sched: &StepSchedule,
    y: &[usize],
    cfg: f64,
    rng: &mut R,
    exec: Exec,
) -> Result<Array2<f64>> {
    let n = y.len();
    let sd = student.sigma_d();
    let x_init = crate::normal_matrix(rng, n, 2, sd);
    let renoise: Vec<Array2<f64>> = (1..sched.steps()).map(|_| crate::normal_matrix(rng, n, 2, sd)).collect();
    let times = sched.times();
    let ranges = par::chunks(n);
    let parts = exec.try_map_range(ranges.len(), |c| {
        let r = ranges[c].clone();
        let m = r.len();
        let cfgs = Array1::from_elem(m, cfg);
        let mut x = x_init.slice(s![r.clone(), ..]).to_owned();
        let mut x0 = x.clone();
        for (i, w) in times.windows(2).enumerate() {
            let t = Array1::from_elem(m, w[0]);
            x0 = student.consistency_f(x.view(), t.view(), &y[r.clone()], cfgs.view())?;
            if x0.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteStep { step: i, what: "consistency estimate".into() });
            }
            if w[1] > 0.0 {
                let z = renoise[i].slice(s![r.clone(), ..]);
                let (co, si) = (trig_cos(w[1]), w[1].sin());
                x = &x0 * co + &z * si;
            }
        }
        Ok(x0)
    })?;
    crate::teacher::stack_rows(parts, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub step_index: usize,
    pub candidate_t: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub schedule: StepSchedule,
    /// Metric of `schedule` under the search's evaluation noise.
    pub metric: f64,
    pub table: Vec<ScoreRow>,
}

/// Search settings. Every candidate is sampled with the same `eval_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpec {
    pub steps: usize,
    /// `t_max` candidates are `arctan(n / sigma_d)` over this grid.
    pub n_grid: Vec<f64>,
    /// Ascending candidate times for the later steps.
    pub grid: Vec<f64>,
    pub cfg: f64,
    pub eval_seed: u64,
    pub exec: Exec,
}

impl SearchSpec {
    pub fn new(steps: usize, grid: Vec<f64>) -> Self {
        SearchSpec { steps, n_grid: vec![50.0, 100.0, 200.0, 400.0], grid, cfg: 4.5, eval_seed: 0, exec: Exec::default() }
    }
}

/// Evaluate a schedule under the common evaluation noise.
pub fn score_schedule<V, M>(student: &TrigFlowAdapter<V>, sched: &StepSchedule, y: &[usize], metric: &M, spec: &SearchSpec) -> Result<f64>
where
    V: VelocityField,
    M: Fn(&Array2<f64>) -> Result<f64> + Sync,
{
    let mut rng = crate::rng_from_seed(spec.eval_seed);
    let samples = multistep_sample(student, sched, y, spec.cfg, &mut rng, Exec::Sequential)?;
    metric(&samples)
}

/// Choose `t_max` first, then each later time with the earlier ones fixed,
/// minimising `metric` over samples for labels `y`.
pub fn search_timesteps<V, M>(student: &TrigFlowAdapter<V>, metric: M, y: &[usize], spec: &SearchSpec) -> Result<SearchResult>
where
    V: VelocityField,
    M: Fn(&Array2<f64>) -> Result<f64> + Sync,
{
    if spec.steps == 0 {
        return Err(Error::Config("search needs steps >= 1".into()));
    }
    if spec.n_grid.is_empty() || (spec.steps > 1 && spec.grid.is_empty()) {
        return Err(Error::Config("search grids must be nonempty".into()));
    }
    if spec.grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("search grid must be sorted ascending".into()));
    }
    let sd = student.sigma_d();
    let mut fixed: Vec<f64> = Vec::new();
    let mut table = Vec::new();
    let mut best_metric = f64::INFINITY;
    for k in 0..spec.steps {
        let candidates: Vec<f64> = if k == 0 {
            spec.n_grid.iter().map(|n| (n / sd).atan()).collect()
        } else {
            let prev = fixed[k - 1];
            spec.grid.iter().copied().filter(|&t| t > 0.0 && t < prev).collect()
        };
        if candidates.is_empty() {
            return Err(Error::Config(format!("no candidate below {} for step {k}", fixed[k - 1])));
        }
        let scores = spec.exec.try_map_range(candidates.len(), |i| {
            let mut times = fixed.clone();
            times.extend([candidates[i], 0.0]);
            score_schedule(student, &StepSchedule::new(times)?, y, &metric, spec)
        })?;
        let mut best = 0;
        for (i, (&t, &m)) in candidates.iter().zip(&scores).enumerate() {
            table.push(ScoreRow { step_index: k, candidate_t: t, metric: m });
            if m < scores[best] {
                best = i;
            }
        }
        fixed.push(candidates[best]);
        best_metric = scores[best];
    }
    fixed.push(0.0);
    Ok(SearchResult { schedule: StepSchedule::new(fixed)?, metric: best_metric, table })
}

/// Write the score table as `step_index,candidate_t,metric`.
pub fn write_score_table(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["step_index", "candidate_t", "metric"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
