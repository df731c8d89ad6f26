use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use super::heads::{column, AdaptiveWeight, DiscriminatorHeads};
use super::DistillConfig;
use crate::error::{Error, Result};
use crate::field::{TangentField, VelocityField};
use crate::net::{VelocityNet, DATA_DIM};
use crate::schedule::trig_cos;
use crate::teacher::Guided;
use crate::toydata::Batch;
use crate::trigflow::{consistency_combine, TrigFlowAdapter};

/// Read-only view of the student used for the stop-gradient branch. It can
/// be evaluated and differentiated forward in time, but offers no reverse
/// pass, so nothing computed through it can reach the parameter gradient.
#[derive(Debug, Clone, Copy)]
pub struct StopGrad<'a>(pub &'a VelocityNet);

impl VelocityField for StopGrad<'_> {
    fn velocity(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        self.0.forward(x, t, y, cfg)
    }

    fn null_class(&self) -> usize {
        self.0.null_class()
    }
}

impl TangentField for StopGrad<'_> {
    fn velocity_jvp(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
        x_tan: ArrayView2<'_, f64>,
        t_tan: ArrayView1<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.0.jvp(x, t, y, cfg, x_tan, t_tan)
    }
}

/// `cos(t) x0 + sin(t) z`, row by row.
pub fn trig_noise(x0: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>, t: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut out = x0.to_owned();
    Zip::from(out.rows_mut()).and(z.rows()).and(t).for_each(|mut o, zr, &ti| {
        let (c, s) = (trig_cos(ti), ti.sin());
        Zip::from(&mut o).and(zr).for_each(|o, &zv| *o = c * *o + s * zv);
    });
    out
}

fn scale_rows(m: &Array2<f64>, f: impl Fn(usize) -> f64) -> Array2<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        row *= f(i);
    }
    out
}

/// All randomness of one discriminator or generator evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    /// Raw clean points.
    pub x0: Array2<f64>,
    pub y: Vec<usize>,
    /// `N(0, sigma_d^2 I)`, shared by every noising in the step.
    pub z: Array2<f64>,
    /// Consistency-branch times (no max-time mass).
    pub t: Array1<f64>,
    /// Adversarial-branch times: `t` with the max-time override applied.
    pub t_gan: Array1<f64>,
    /// Discriminator renoising times.
    pub s: Array1<f64>,
    /// Guidance scale, constant over the batch.
    pub cfg: Array1<f64>,
}

impl Draws {
    pub fn draw<R: Rng + ?Sized>(batch: &Batch, sigma_d: f64, cfg: &DistillConfig, rng: &mut R) -> Self {
        let b = batch.len();
        let z = crate::normal_matrix(rng, b, 2, sigma_d);
        let t = Array1::from_shape_fn(b, |_| cfg.gen_tdist.sample_base(rng));
        let t_gan = t.mapv(|ti| cfg.gen_tdist.apply_max_time(ti, rng));
        let s = Array1::from_shape_fn(b, |_| cfg.disc_tdist.sample(rng));
        let scale = cfg.cfg_scales[rng.random_range(0..cfg.cfg_scales.len())];
        Draws { x0: batch.x0.clone(), y: batch.y.clone(), z, t, t_gan, s, cfg: Array1::from_elem(b, scale) }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn x_t(&self) -> Array2<f64> {
        trig_noise(self.x0.view(), self.z.view(), self.t.view())
    }

    pub fn x_gan(&self) -> Array2<f64> {
        trig_noise(self.x0.view(), self.z.view(), self.t_gan.view())
    }
}

#[derive(Debug, Clone)]
pub struct Tangent {
    /// Normalised tangent.
    pub g: Array2<f64>,
    pub g_raw: Array2<f64>,
    /// Stop-gradient student prediction F(x_t / sigma_d, t).
    pub f_minus: Array2<f64>,
    /// Teacher ODE velocity in raw units.
    pub dxdt: Array2<f64>,
}

/// Consistency tangent
/// `g = -cos^2 t (sigma_d F- - dx/dt) - r cos t sin t (x_t + sigma_d dF-/dt)`,
/// normalised per sample by `|g| + c`. `dx/dt` is `sigma_d` times the
/// teacher's (guided) TrigFlow velocity; `dF-/dt` is one JVP of the
/// stop-gradient student along `(dx/dt, 1)`, skipped when `r = 0`.
#[allow(clippy::too_many_arguments)]
pub fn scm_tangent<T: VelocityField, S: TangentField>(
    teacher: &TrigFlowAdapter<T>,
    student_sg: &TrigFlowAdapter<S>,
    x_t: ArrayView2<'_, f64>,
    t: ArrayView1<'_, f64>,
    y: &[usize],
    cfg: ArrayView1<'_, f64>,
    r: f64,
    c: f64,
) -> Result<Tangent> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Usage(format!("warmup ratio {r} not in [0, 1]")));
    }
    let sd = student_sg.sigma_d();
    let dxdt = teacher.trig_velocity(x_t, t, y, cfg)? * teacher.sigma_d();
    let (f_minus, df_minus) = if r > 0.0 {
        let ones = Array1::ones(t.len());
        let (f, df) = student_sg.trig_velocity_jvp(x_t, t, y, cfg, dxdt.view(), ones.view())?;
        (f, Some(df))
    } else {
        (student_sg.trig_velocity(x_t, t, y, cfg)?, None)
    };
    let mut g_raw = Array2::zeros(x_t.raw_dim());
    for i in 0..t.len() {
        let (co, si) = (trig_cos(t[i]), t[i].sin());
        for j in 0..x_t.ncols() {
            let mut gij = -co * co * (sd * f_minus[[i, j]] - dxdt[[i, j]]);
            if let Some(df) = &df_minus {
                gij -= r * co * si * (x_t[[i, j]] + sd * df[[i, j]]);
            }
            g_raw[[i, j]] = gij;
        }
    }
    if g_raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite consistency tangent".into()));
    }
    let norms: Vec<f64> = g_raw.outer_iter().map(|row| row.dot(&row).sqrt()).collect();
    let g = scale_rows(&g_raw, |i| 1.0 / (norms[i] + c));
    Ok(Tangent { g, g_raw, f_minus, dxdt })
}

/// Everything the generator objective reads. `live` receives gradients;
/// `sg` supplies the stop-gradient branch and is normally the same net.
#[derive(Debug, Clone, Copy)]
pub struct GenParts<'a> {
    pub live: &'a VelocityNet,
    pub sg: &'a VelocityNet,
    pub teacher: &'a VelocityNet,
    pub heads: &'a DiscriminatorHeads,
    pub wphi: &'a AdaptiveWeight,
    pub sigma_d: f64,
}

#[derive(Debug, Clone)]
pub struct GenOutput {
    /// `scm_loss + lambda_adv * adv_loss` over the active terms.
    pub loss: f64,
    pub scm_loss: f64,
    pub adv_loss: f64,
    pub t_mean: f64,
    pub grad_student: Vec<f64>,
    pub grad_wphi: Vec<f64>,
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

/// Generator objective and its gradients with respect to the live student
/// and the adaptive weight. Teacher and heads are read only.
pub fn generator_eval(p: &GenParts<'_>, d: &Draws, r: f64, cfg: &DistillConfig) -> Result<GenOutput> {
    let sd = p.sigma_d;
    let b = d.len() as f64;
    let live = TrigFlowAdapter::new(p.live, sd)?;
    let mut grad_student = vec![0.0; p.live.num_params()];
    let mut grad_wphi = vec![0.0; p.wphi.params().len()];
    let (mut scm_loss, mut adv_loss) = (0.0, 0.0);

    if cfg.mode.uses_scm() {
        let teacher = TrigFlowAdapter::new(Guided(p.teacher), sd)?;
        let sg = TrigFlowAdapter::new(StopGrad(p.sg), sd)?;
        let x_t = d.x_t();
        let tan = scm_tangent(&teacher, &sg, x_t.view(), d.t.view(), &d.y, d.cfg.view(), r, cfg.tangent_c)?;
        let cache = live.forward_cached(x_t.view(), d.t.view(), &d.y, d.cfg.view())?;
        let resid = &cache.out - &tan.f_minus - &tan.g;
        let q: Array1<f64> = resid.outer_iter().map(|row| row.dot(&row) / DATA_DIM as f64).collect();
        let (w, gw) = p.wphi.value_and_grad(d.t.view(), |w| {
            w.iter().zip(&q).map(|(wi, qi)| (wi.exp() * qi - 1.0) / b).collect()
        });
        scm_loss = w.iter().zip(&q).map(|(wi, qi)| wi.exp() * qi - wi).sum::<f64>() / b;
        let d_f = scale_rows(&resid, |i| 2.0 * w[i].exp() / (DATA_DIM as f64 * b));
        let (gp, _) = live.backward(&cache, Some(d_f.view()), &[], true);
        add_into(&mut grad_student, &gp.expect("parameter gradients were requested"));
        grad_wphi = gw;
    }

    if cfg.mode.uses_adv() && cfg.lambda_adv > 0.0 {
        let x_g = d.x_gan();
        let cache = live.forward_cached(x_g.view(), d.t_gan.view(), &d.y, d.cfg.view())?;
        let x0_hat = consistency_combine(x_g.view(), d.t_gan.view(), &cache.out, sd);
        let x_s = trig_noise(x0_hat.view(), d.z.view(), d.s.view());
        let teacher = TrigFlowAdapter::new(p.teacher, sd)?;
        let zero = Array1::zeros(d.len());
        let tc = teacher.forward_cached(x_s.view(), d.s.view(), &d.y, zero.view())?;
        let hc = p.heads.forward_cached(tc.taps());
        let upstream = Array2::from_elem((d.len(), 1), -1.0 / b);
        let mut d_taps = Vec::with_capacity(hc.len());
        for (k, cache_k) in hc.iter().enumerate() {
            adv_loss -= cache_k.out.sum() / b;
            let (_, dt) = p.heads.head(k).backward(cache_k, upstream.view(), false);
            d_taps.push(dt);
        }
        let tap_views: Vec<_> = d_taps.iter().map(|m| Some(m.view())).collect();
        let (_, dx_s) = teacher.backward(&tc, None, &tap_views, false);
        let d_f = scale_rows(&dx_s, |i| -cfg.lambda_adv * trig_cos(d.s[i]) * d.t_gan[i].sin() * sd);
        let (gp, _) = live.backward(&cache, Some(d_f.view()), &[], true);
        add_into(&mut grad_student, &gp.expect("parameter gradients were requested"));
    }

    let scm_part = if cfg.mode.uses_scm() { scm_loss } else { 0.0 };
    let loss = scm_part + cfg.lambda_adv * adv_loss;
    if !loss.is_finite() || grad_student.iter().chain(&grad_wphi).any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite generator loss {loss}")));
    }
    let t_mean = d.t.sum() / b;
    Ok(GenOutput { loss, scm_loss, adv_loss, t_mean, grad_student, grad_wphi })
}

/// Hinge discriminator loss `mean relu(1 - real) + mean relu(1 + fake)` with
/// its derivatives with respect to the head outputs.
pub fn disc_hinge(real: ArrayView1<'_, f64>, fake: ArrayView1<'_, f64>) -> (f64, Array1<f64>, Array1<f64>) {
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    let value = real.iter().map(|v| (1.0 - v).max(0.0)).sum::<f64>() / nr
        + fake.iter().map(|v| (1.0 + v).max(0.0)).sum::<f64>() / nf;
    let dr = real.mapv(|v| if 1.0 - v > 0.0 { -1.0 / nr } else { 0.0 });
    let df = fake.mapv(|v| if 1.0 + v > 0.0 { 1.0 / nf } else { 0.0 });
    (value, dr, df)
}

#[derive(Debug, Clone)]
pub struct DiscOutput {
    /// Summed over heads.
    pub loss: f64,
    /// Per-head parameter gradients.
    pub grads: Vec<Vec<f64>>,
}

/// Discriminator loss on real and one-step fake samples, both renoised to
/// time `s` with the same noise, and the head gradients.
pub fn discriminator_eval(
    student_sg: &VelocityNet,
    teacher: &VelocityNet,
    heads: &DiscriminatorHeads,
    d: &Draws,
    sigma_d: f64,
) -> Result<DiscOutput> {
    let n = d.len();
    let sg = TrigFlowAdapter::new(StopGrad(student_sg), sigma_d)?;
    let x_g = d.x_gan();
    let x0_hat = sg.consistency_f(x_g.view(), d.t_gan.view(), &d.y, d.cfg.view())?;
    let real = trig_noise(d.x0.view(), d.z.view(), d.s.view());
    let fake = trig_noise(x0_hat.view(), d.z.view(), d.s.view());
    let both = concatenate![Axis(0), real, fake];
    let s2 = concatenate![Axis(0), d.s, d.s];
    let y2: Vec<usize> = d.y.iter().chain(&d.y).copied().collect();
    let zero = Array1::zeros(2 * n);
    let tc = TrigFlowAdapter::new(teacher, sigma_d)?.forward_cached(both.view(), s2.view(), &y2, zero.view())?;
    let hc = heads.forward_cached(tc.taps());
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(hc.len());
    for (k, cache_k) in hc.iter().enumerate() {
        let out = column(cache_k.out.view());
        let (v, dr, df) = disc_hinge(out.slice(s![..n]), out.slice(s![n..]));
        loss += v;
        let upstream = concatenate![Axis(0), dr, df].insert_axis(Axis(1));
        let (g, _) = heads.head(k).backward(cache_k, upstream.view(), true);
        grads.push(g.expect("parameter gradients were requested"));
    }
    if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite discriminator loss {loss}")));
    }
    Ok(DiscOutput { loss, grads })
}
