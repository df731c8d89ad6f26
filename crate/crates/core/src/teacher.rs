//! Flow-matching teacher: pretraining, guided velocity and Euler sampling.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{TangentField, VelocityField};
use crate::net::VelocityNet;
use crate::optim::{Adam, AdamConfig};
use crate::par::{self, Exec};
use crate::toydata::{Batch, Dataset};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    Constant,
}

impl Weighting {
    pub fn weight(self, _t: f64) -> f64 {
        match self {
            Weighting::Constant => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub lr: f64,
    pub iters: u64,
    pub batch: usize,
    pub weighting: Weighting,
    pub cfg_scales: Vec<f64>,
    pub uncond_drop_prob: f64,
    pub log_every: u64,
    pub decay: LrDecay,
}

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrDecay {
    Constant,
    /// Half-cosine from 1 down to 0 at the final iteration.
    #[default]
    Cosine,
}

impl LrDecay {
    pub fn factor(self, iter: u64, total: u64) -> f64 {
        match self {
            LrDecay::Constant => 1.0,
            LrDecay::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * (iter - 1) as f64 / total as f64).cos()),
        }
    }
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            lr: 2e-4,
            iters: 2000,
            batch: 256,
            weighting: Weighting::Constant,
            cfg_scales: vec![4.0, 4.5, 5.0],
            uncond_drop_prob: 0.1,
            log_every: 100,
            decay: LrDecay::Cosine,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cfg_scales.is_empty() {
            return Err(Error::Config("cfg_scales must be nonempty".into()));
        }
        if !(0.0..=1.0).contains(&self.uncond_drop_prob) {
            return Err(Error::Config(format!("uncond_drop_prob {} not in [0, 1]", self.uncond_drop_prob)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("teacher lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.log_every == 0 {
            return Err(Error::Config("teacher batch and log_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Randomness of one flow-matching loss evaluation, drawn up front.
#[derive(Debug, Clone, PartialEq)]
pub struct FmDraws {
    /// Standardised clean points.
    pub x0: Array2<f64>,
    pub y: Vec<usize>,
    pub t: Array1<f64>,
    pub z: Array2<f64>,
}

impl FmDraws {
    /// Standardises `batch` by `sigma_d`, drops labels to `null` with
    /// probability `drop_prob`, and draws `t ~ U(0,1)`, `z ~ N(0, I)`.
    pub fn draw<R: Rng + ?Sized>(batch: &Batch, sigma_d: f64, null: usize, drop_prob: f64, rng: &mut R) -> Self {
        let b = batch.len();
        let x0 = batch.x0.mapv(|v| v / sigma_d);
        let y = batch
            .y
            .iter()
            .map(|&l| if drop_prob > 0.0 && rng.random::<f64>() < drop_prob { null } else { l })
            .collect();
        let t = Array1::from_shape_fn(b, |_| rng.random::<f64>());
        let z = crate::normal_matrix(rng, b, 2, 1.0);
        FmDraws { x0, y, t, z }
    }

    pub fn x_t(&self) -> Array2<f64> {
        let t = self.t.view().insert_axis(Axis(1));
        &self.x0 * &t.mapv(|v| 1.0 - v) + &self.z * &t
    }

    pub fn target(&self) -> Array2<f64> {
        &self.z - &self.x0
    }
}

/// Mean weighted squared error of `field` against `z - x0`.
pub fn fm_loss_with<V: VelocityField>(field: &V, draws: &FmDraws, weighting: Weighting) -> Result<f64> {
    let b = draws.y.len();
    let cfg = Array1::zeros(b);
    let v = field.velocity(draws.x_t().view(), draws.t.view(), &draws.y, cfg.view())?;
    let err = &v - &draws.target();
    let total: f64 = err
        .outer_iter()
        .zip(draws.t.iter())
        .map(|(row, &t)| weighting.weight(t) * row.dot(&row))
        .sum();
    Ok(total / b as f64)
}

/// Flow-matching loss on a minibatch of raw (unstandardised) samples.
pub fn fm_loss<R: Rng + ?Sized>(
    net: &VelocityNet,
    batch: &Batch,
    sigma_d: f64,
    cfg: &TeacherConfig,
    rng: &mut R,
) -> Result<f64> {
    let draws = FmDraws::draw(batch, sigma_d, net.null_class(), cfg.uncond_drop_prob, rng);
    fm_loss_with(net, &draws, cfg.weighting)
}

/// Loss and flat parameter gradient for one set of draws.
pub fn fm_loss_grad(net: &VelocityNet, draws: &FmDraws, weighting: Weighting) -> Result<(f64, Vec<f64>)> {
    let b = draws.y.len();
    let cfg = Array1::zeros(b);
    let target = draws.target();
    let w: Vec<f64> = draws.t.iter().map(|&t| weighting.weight(t)).collect();
    net.grad(draws.x_t().view(), draws.t.view(), &draws.y, cfg.view(), |out| {
        let err = out - &target;
        let mut value = 0.0;
        let mut d = err.clone();
        for ((row, mut drow), &wi) in err.outer_iter().zip(d.outer_iter_mut()).zip(&w) {
            value += wi * row.dot(&row);
            drow *= 2.0 * wi / b as f64;
        }
        (value / b as f64, d)
    })
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub net: VelocityNet,
    /// `(iter, mean loss over the preceding window)`.
    pub curve: Vec<(u64, f64)>,
}

/// Pretrain `net` on standardised data with Adam. The cfg embedding stays
/// frozen at its initial value and is fed zeros.
pub fn train_teacher<R: Rng + ?Sized>(
    mut net: VelocityNet,
    data: &Dataset,
    cfg: &TeacherConfig,
    rng: &mut R,
) -> Result<TeacherRun> {
    cfg.validate()?;
    if cfg.iters == 0 {
        return Err(Error::Config("teacher iters must be >= 1".into()));
    }
    let mask = net.trainable_mask(&["cfg."]);
    let mut opt = Adam::with_mask(AdamConfig::with_lr(cfg.lr), mask);
    let mut curve = Vec::new();
    let mut window = 0.0;
    let mut in_window = 0u64;
    for iter in 1..=cfg.iters {
        let batch = Batch::from_samples(&data.minibatch(cfg.batch, rng)?);
        let draws = FmDraws::draw(&batch, data.sigma_d, net.null_class(), cfg.uncond_drop_prob, rng);
        let (loss, grad) = fm_loss_grad(&net, &draws, cfg.weighting).map_err(|e| match e {
            Error::Numeric(what) => Error::Divergence { iter, what },
            other => other,
        })?;
        opt.set_lr(cfg.lr * cfg.decay.factor(iter, cfg.iters));
        opt.step(net.params_mut(), &grad).map_err(|e| Error::Divergence { iter, what: e.to_string() })?;
        window += loss;
        in_window += 1;
        if iter % cfg.log_every == 0 || iter == cfg.iters {
            curve.push((iter, window / in_window as f64));
            window = 0.0;
            in_window = 0;
        }
    }
    if !net.is_finite() {
        return Err(Error::Divergence { iter: cfg.iters, what: "non-finite parameters".into() });
    }
    Ok(TeacherRun { net, curve })
}

/// Write the loss curve as `iter,loss`.
pub fn write_loss_curve(path: &std::path::Path, curve: &[(u64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "loss"])?;
    for (iter, loss) in curve {
        w.write_record([iter.to_string(), loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `(1 - s) v_uncond + s v_cond`, one forward pass per branch.
pub fn cfg_velocity(
    net: &VelocityNet,
    x: ArrayView2<'_, f64>,
    t: ArrayView1<'_, f64>,
    y: &[usize],
    scale: f64,
) -> Result<Array2<f64>> {
    let scales = Array1::from_elem(y.len(), scale);
    Guided(net).velocity(x, t, y, scales.view())
}

/// Classifier-free guidance over a net that was trained with a null class.
/// The per-row `cfg` argument is read as the guidance scale; the wrapped net
/// always sees a zero cfg input.
#[derive(Debug, Clone, Copy)]
pub struct Guided<V>(pub V);

impl<V: VelocityField> Guided<V> {
    fn branches(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let zero = Array1::zeros(y.len());
        let null = vec![self.0.null_class(); y.len()];
        let vu = self.0.velocity(x, t, &null, zero.view())?;
        let vc = self.0.velocity(x, t, y, zero.view())?;
        Ok((vu, vc))
    }
}

fn combine(vu: &Array2<f64>, vc: &Array2<f64>, scale: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut out = vc.clone();
    for ((mut o, (u, c)), &s) in out.outer_iter_mut().zip(vu.outer_iter().zip(vc.outer_iter())).zip(scale) {
        for j in 0..o.len() {
            o[j] = (1.0 - s) * u[j] + s * c[j];
        }
    }
    out
}

impl<V: VelocityField> VelocityField for Guided<V> {
    fn velocity(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        let (vu, vc) = self.branches(x, t, y)?;
        Ok(combine(&vu, &vc, cfg))
    }

    fn null_class(&self) -> usize {
        self.0.null_class()
    }
}

impl<V: TangentField> TangentField for Guided<V> {
    fn velocity_jvp(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
        x_tan: ArrayView2<'_, f64>,
        t_tan: ArrayView1<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let zero = Array1::zeros(y.len());
        let null = vec![self.0.null_class(); y.len()];
        let (vu, du) = self.0.velocity_jvp(x, t, &null, zero.view(), x_tan, t_tan)?;
        let (vc, dc) = self.0.velocity_jvp(x, t, y, zero.view(), x_tan, t_tan)?;
        Ok((combine(&vu, &vc, cfg), combine(&du, &dc, cfg)))
    }
}

/// Euler integration of the flow-matching PF-ODE from `t = 1` to `t = 0` on a
/// uniform grid, in raw data units: `dx/dt = sigma_d * v(x / sigma_d, t)`,
/// starting from `N(0, sigma_d^2 I)`. `cfg` is passed to the field as is, so
/// wrap the net in [`Guided`] to sample with guidance.
#[allow(clippy::too_many_arguments)]
pub fn euler_sample_fm<V: VelocityField, R: Rng + ?Sized>(
    field: &V,
    n: usize,
    steps: usize,
    y: &[usize],
    cfg: f64,
    sigma_d: f64,
    rng: &mut R,
    exec: Exec,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::Config("Euler sampler needs steps >= 1".into()));
    }
    if y.len() != n {
        return Err(Error::Usage(format!("{} labels for {n} samples", y.len())));
    }
    let x1 = crate::normal_matrix(rng, n, 2, sigma_d);
    let dt = 1.0 / steps as f64;
    let ranges = par::chunks(n);
    let parts = exec.try_map_range(ranges.len(), |c| {
        let r = ranges[c].clone();
        let mut x = x1.slice(s![r.clone(), ..]).to_owned();
        let ys = &y[r.clone()];
        let cfgs = Array1::from_elem(r.len(), cfg);
        for k in 0..steps {
            let t = Array1::from_elem(r.len(), 1.0 - k as f64 * dt);
            let xs = x.mapv(|v| v / sigma_d);
            let v = field.velocity(xs.view(), t.view(), ys, cfgs.view())?;
            x.scaled_add(-dt * sigma_d, &v);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteStep { step: k, what: "flow-matching Euler state".into() });
            }
        }
        Ok(x)
    })?;
    stack_rows(parts, n)
}

pub(crate) fn stack_rows(parts: Vec<Array2<f64>>, n: usize) -> Result<Array2<f64>> {
    if parts.is_empty() {
        return Ok(Array2::zeros((n, 2)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("chunks share the column count"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{GaussianOracle, ZeroField};
    use crate::net::NetConfig;
    use crate::rng_from_seed;
    use crate::toydata::{generate_from, DatasetSpec, Sample};

    fn small_net(seed: u64) -> VelocityNet {
        let cfg = NetConfig { width: 32, depth: 2, time_freqs: 8, token_dim: 8, zero_init_output: false, ..NetConfig::default() };
        VelocityNet::new(cfg, &mut rng_from_seed(seed)).unwrap()
    }

    struct Perfect(Array2<f64>);

    impl VelocityField for Perfect {
        fn velocity(
            &self,
            _x: ArrayView2<'_, f64>,
            _t: ArrayView1<'_, f64>,
            _y: &[usize],
            _cfg: ArrayView1<'_, f64>,
        ) -> Result<Array2<f64>> {
            Ok(self.0.clone())
        }

        fn null_class(&self) -> usize {
            0
        }
    }

    #[test]
    fn perfect_field_has_zero_loss() {
        let mut rng = rng_from_seed(1);
        let batch = Batch::from_samples(&[Sample { x0: [0.3, -0.2], y: 0 }, Sample { x0: [1.0, 2.0], y: 0 }]);
        let draws = FmDraws::draw(&batch, 1.0, 3, 0.0, &mut rng);
        let loss = fm_loss_with(&Perfect(draws.target()), &draws, Weighting::Constant).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn zero_field_matches_gaussian_moment() {
        // Standardised data has unit variance per coordinate and so does z:
        // E|z - x0|^2 = 2 * (1 + 1).
        let data = generate_from(&DatasetSpec::single_gaussian(0.7), 20_000, 3).unwrap();
        let batch = Batch { x0: data.points_array(), y: data.labels.clone() };
        let draws = FmDraws::draw(&batch, data.sigma_d, 1, 0.0, &mut rng_from_seed(4));
        let loss = fm_loss_with(&ZeroField, &draws, Weighting::Constant).unwrap();
        assert!((loss - 4.0).abs() < 0.1, "loss {loss}");
    }

    #[test]
    fn loss_is_non_negative() {
        let net = small_net(5);
        let data = generate_from(&DatasetSpec::default(), 64, 6).unwrap();
        let mut rng = rng_from_seed(7);
        for _ in 0..5 {
            let batch = Batch::from_samples(&data.minibatch(16, &mut rng).unwrap());
            assert!(fm_loss(&net, &batch, data.sigma_d, &TeacherConfig::default(), &mut rng).unwrap() >= 0.0);
        }
    }

    #[test]
    fn zero_iters_is_an_error() {
        let data = generate_from(&DatasetSpec::default(), 64, 6).unwrap();
        let cfg = TeacherConfig { iters: 0, ..TeacherConfig::default() };
        assert!(train_teacher(small_net(1), &data, &cfg, &mut rng_from_seed(2)).is_err());
    }

    #[test]
    fn cfg_velocity_endpoints_and_affinity() {
        let net = small_net(8);
        let x = crate::normal_matrix(&mut rng_from_seed(9), 6, 2, 1.0);
        let t = Array1::linspace(0.1, 0.9, 6);
        let y = vec![0, 1, 2, 0, 1, 2];
        let zero = Array1::zeros(6);
        let vc = net.forward(x.view(), t.view(), &y, zero.view()).unwrap();
        let vu = net.forward(x.view(), t.view(), &[3; 6], zero.view()).unwrap();
        assert_eq!(cfg_velocity(&net, x.view(), t.view(), &y, 1.0).unwrap(), vc);
        assert_eq!(cfg_velocity(&net, x.view(), t.view(), &y, 0.0).unwrap(), vu);
        let a = cfg_velocity(&net, x.view(), t.view(), &y, 4.0).unwrap();
        let b = cfg_velocity(&net, x.view(), t.view(), &y, 5.0).unwrap();
        let m = cfg_velocity(&net, x.view(), t.view(), &y, 4.5).unwrap();
        let mid = (&a + &b) / 2.0;
        assert!((&m - &mid).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn one_step_zero_field_returns_noise() {
        let y = vec![0; 10];
        let out = euler_sample_fm(&ZeroField, 10, 1, &y, 0.0, 0.5, &mut rng_from_seed(3), Exec::Sequential).unwrap();
        assert_eq!(out, crate::normal_matrix(&mut rng_from_seed(3), 10, 2, 0.5));
    }

    #[test]
    fn oracle_euler_keeps_gaussian_std() {
        let sigma_d = 0.5;
        let n = 20_000;
        let y = vec![0; n];
        let out = euler_sample_fm(&GaussianOracle, n, 50, &y, 0.0, sigma_d, &mut rng_from_seed(11), Exec::Parallel).unwrap();
        let std = (out.iter().map(|v| v * v).sum::<f64>() / (2 * n) as f64).sqrt();
        assert!((std / sigma_d - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn euler_sampler_is_deterministic_across_policies() {
        let net = small_net(12);
        let y = vec![1; 300];
        let a = euler_sample_fm(&Guided(&net), 300, 4, &y, 4.5, 0.5, &mut rng_from_seed(1), Exec::Sequential).unwrap();
        let b = euler_sample_fm(&Guided(&net), 300, 4, &y, 4.5, 0.5, &mut rng_from_seed(1), Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
