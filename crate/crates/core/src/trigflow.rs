//! Training-free conversion of a flow-matching velocity net into a TrigFlow
//! model, the consistency parameterisation on top of it, and TrigFlow Euler
//! sampling.
//!
//! Inputs are raw TrigFlow states `x_t = cos(t) x0 + sin(t) z` with
//! `z ~ N(0, sigma_d^2 I)`; the division by `sigma_d` happens here, never in
//! callers. The wrapped net lives in standardised flow-matching space.

use std::borrow::Borrow;
use std::f64::consts::FRAC_PI_2;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::field::{TangentField, VelocityField};
use crate::net::{ForwardCache, VelocityNet};
use crate::par::{self, Exec};
use crate::schedule::trig_cos;

/// Flow-matching time with the same SNR as TrigFlow time `t`.
pub fn t_fm_of(t_trig: f64) -> Result<f64> {
    if !(t_trig.is_finite() && (0.0..=FRAC_PI_2).contains(&t_trig)) {
        return Err(Error::Domain(format!("TrigFlow time {t_trig} outside [0, pi/2]")));
    }
    Ok(t_fm_raw(t_trig))
}

fn t_fm_raw(t: f64) -> f64 {
    let (s, c) = (t.sin(), trig_cos(t));
    s / (s + c)
}

/// d t_fm / d t_trig.
pub fn t_fm_derivative(t_trig: f64) -> f64 {
    let sum = t_trig.sin() + trig_cos(t_trig);
    1.0 / (sum * sum)
}

/// lambda(t_fm) = sqrt(t_fm^2 + (1 - t_fm)^2).
pub fn scale_factor(t_fm: f64) -> f64 {
    (t_fm * t_fm + (1.0 - t_fm) * (1.0 - t_fm)).sqrt()
}

/// d lambda / d t_fm.
pub fn scale_factor_derivative(t_fm: f64) -> f64 {
    (2.0 * t_fm - 1.0) / scale_factor(t_fm)
}

/// Per-row quantities of the time and state maps.
#[derive(Debug, Clone)]
struct Mapped {
    tau: Array1<f64>,
    lam: Array1<f64>,
    /// x / sigma_d
    xs: Array2<f64>,
    x_fm: Array2<f64>,
}

fn col(v: &Array1<f64>) -> ArrayView2<'_, f64> {
    v.view().insert_axis(Axis(1))
}

/// `(1 - 2 tau) xs + lambda v`, which equals
/// `[(1 - 2 tau) x_fm + (1 - 2 tau + 2 tau^2) v] / lambda`.
fn assemble(m: &Mapped, v: &Array2<f64>) -> Array2<f64> {
    let a = m.tau.mapv(|t| 1.0 - 2.0 * t);
    &m.xs * &col(&a) + v * &col(&m.lam)
}

#[derive(Debug, Clone)]
pub struct TrigFlowAdapter<V> {
    inner: V,
    sigma_d: f64,
}

impl<V> TrigFlowAdapter<V> {
    pub fn new(inner: V, sigma_d: f64) -> Result<Self> {
        if !(sigma_d > 0.0 && sigma_d.is_finite()) {
            return Err(Error::Config(format!("sigma_d must be positive, got {sigma_d}")));
        }
        Ok(TrigFlowAdapter { inner, sigma_d })
    }

    pub fn inner(&self) -> &V {
        &self.inner
    }

    pub fn into_inner(self) -> V {
        self.inner
    }

    pub fn sigma_d(&self) -> f64 {
        self.sigma_d
    }

    fn map(&self, x: ArrayView2<'_, f64>, t: ArrayView1<'_, f64>) -> Result<Mapped> {
        if x.nrows() != t.len() {
            return Err(Error::Usage(format!("{} states but {} times", x.nrows(), t.len())));
        }
        let tau = t.iter().map(|&v| t_fm_of(v)).collect::<Result<Array1<f64>>>()?;
        let lam = tau.mapv(scale_factor);
        let xs = x.mapv(|v| v / self.sigma_d);
        let x_fm = &xs * &col(&lam);
        Ok(Mapped { tau, lam, xs, x_fm })
    }
}

impl<V: VelocityField> TrigFlowAdapter<V> {
    /// F(x / sigma_d, t) for raw TrigFlow states.
    pub fn trig_velocity(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        let m = self.map(x, t)?;
        let v = self.inner.velocity(m.x_fm.view(), m.tau.view(), y, cfg)?;
        Ok(assemble(&m, &v))
    }

    /// f(x, t) = cos(t) x - sin(t) sigma_d F(x / sigma_d, t).
    pub fn consistency_f(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        let f = self.trig_velocity(x, t, y, cfg)?;
        Ok(consistency_combine(x, t, &f, self.sigma_d))
    }

    /// Euler integration of `dx/dt = sigma_d F(x / sigma_d, t)` from pi/2 to 0
    /// on a uniform grid, starting from `N(0, sigma_d^2 I)`.
    #[allow(clippy::too_many_arguments)]
    pub fn euler_sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        steps: usize,
        y: &[usize],
        cfg: f64,
        rng: &mut R,
        exec: Exec,
    ) -> Result<Array2<f64>> {
        if steps == 0 {
            return Err(Error::Config("Euler sampler needs steps >= 1".into()));
        }
        if y.len() != n {
            return Err(Error::Usage(format!("{} labels for {n} samples", y.len())));
        }
        let x_init = crate::normal_matrix(rng, n, 2, self.sigma_d);
        let dt = FRAC_PI_2 / steps as f64;
        let ranges = par::chunks(n);
        let parts = exec.try_map_range(ranges.len(), |c| {
            let r = ranges[c].clone();
            let mut x = x_init.slice(s![r.clone(), ..]).to_owned();
            let cfgs = Array1::from_elem(r.len(), cfg);
            for k in 0..steps {
                let tk = if k == 0 { FRAC_PI_2 } else { FRAC_PI_2 - k as f64 * dt };
                let t = Array1::from_elem(r.len(), tk);
                let f = self.trig_velocity(x.view(), t.view(), &y[r.clone()], cfgs.view())?;
                x.scaled_add(-dt * self.sigma_d, &f);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteStep { step: k, what: "TrigFlow Euler state".into() });
                }
            }
            Ok(x)
        })?;
        crate::teacher::stack_rows(parts, n)
    }
}

impl<V: TangentField> TrigFlowAdapter<V> {
    /// F and its directional derivative along `(x_tan, t_tan)`, pushed
    /// through the time map, the state scaling and the output recombination.
    #[allow(clippy::too_many_arguments)]
    pub fn trig_velocity_jvp(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
        x_tan: ArrayView2<'_, f64>,
        t_tan: ArrayView1<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if x_tan.dim() != x.dim() || t_tan.len() != t.len() {
            return Err(Error::Usage("tangent shapes do not match primal shapes".into()));
        }
        let m = self.map(x, t)?;
        let dtau = Array1::from_shape_fn(t.len(), |i| t_fm_derivative(t[i]) * t_tan[i]);
        let dlam = Array1::from_shape_fn(t.len(), |i| scale_factor_derivative(m.tau[i]) * dtau[i]);
        let dxs = x_tan.mapv(|v| v / self.sigma_d);
        let dx_fm = &dxs * &col(&m.lam) + &m.xs * &col(&dlam);
        let (v, dv) = self.inner.velocity_jvp(m.x_fm.view(), m.tau.view(), y, cfg, dx_fm.view(), dtau.view())?;
        let f = assemble(&m, &v);
        let a = m.tau.mapv(|t| 1.0 - 2.0 * t);
        let da = dtau.mapv(|d| -2.0 * d);
        let df = &m.xs * &col(&da) + &dxs * &col(&a) + &v * &col(&dlam) + &dv * &col(&m.lam);
        if df.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite TrigFlow tangent".into()));
        }
        Ok((f, df))
    }
}

/// Forward state of the adapter over a concrete net, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct TrigCache {
    net: ForwardCache,
    map: Mapped,
    /// F(x / sigma_d, t)
    pub out: Array2<f64>,
}

impl TrigCache {
    /// Hidden activations of the wrapped net.
    pub fn taps(&self) -> &[Array2<f64>] {
        self.net.taps()
    }
}

impl<N: Borrow<VelocityNet>> TrigFlowAdapter<N> {
    pub fn net(&self) -> &VelocityNet {
        self.inner.borrow()
    }

    pub fn forward_cached(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
    ) -> Result<TrigCache> {
        let m = self.map(x, t)?;
        let net = self.net().forward_cached(m.x_fm.view(), m.tau.view(), y, cfg)?;
        let out = assemble(&m, net.out());
        Ok(TrigCache { net, map: m, out })
    }

    /// Reverse pass from gradients on F and on the wrapped net's hidden
    /// activations. Returns the parameter gradient (when requested) and the
    /// gradient with respect to the raw input states.
    pub fn backward(
        &self,
        cache: &TrigCache,
        d_f: Option<ArrayView2<'_, f64>>,
        d_taps: &[Option<ArrayView2<'_, f64>>],
        params: bool,
    ) -> (Option<Vec<f64>>, Array2<f64>) {
        let m = &cache.map;
        let dv = d_f.map(|d| &d * &col(&m.lam));
        let opts = crate::net::BackwardOpts { params, time: false };
        let g = self.net().backward_with(&cache.net, dv.as_ref().map(|d| d.view()), d_taps, opts);
        let mut dxs = &g.x * &col(&m.lam);
        if let Some(d) = d_f {
            let a = m.tau.mapv(|t| 1.0 - 2.0 * t);
            dxs += &(&d * &col(&a));
        }
        dxs.mapv_inplace(|v| v / self.sigma_d);
        (g.params, dxs)
    }
}

/// cos(t) x - sin(t) sigma_d F, row by row.
pub fn consistency_combine(x: ArrayView2<'_, f64>, t: ArrayView1<'_, f64>, f: &Array2<f64>, sigma_d: f64) -> Array2<f64> {
    let mut out = x.to_owned();
    Zip::from(out.rows_mut()).and(f.rows()).and(t).for_each(|mut o, fr, &ti| {
        let (c, s) = (trig_cos(ti), ti.sin());
        Zip::from(&mut o).and(fr).for_each(|o, &fv| *o = c * *o - s * sigma_d * fv);
    });
    out
}

/// Free-function form of [`TrigFlowAdapter::trig_velocity`].
pub fn trig_velocity<V: VelocityField>(
    adapter: &TrigFlowAdapter<V>,
    x: ArrayView2<'_, f64>,
    t: ArrayView1<'_, f64>,
    y: &[usize],
    cfg: ArrayView1<'_, f64>,
) -> Result<Array2<f64>> {
    adapter.trig_velocity(x, t, y, cfg)
}

/// Free-function form of [`TrigFlowAdapter::consistency_f`].
pub fn consistency_f<V: VelocityField>(
    adapter: &TrigFlowAdapter<V>,
    x: ArrayView2<'_, f64>,
    t: ArrayView1<'_, f64>,
    y: &[usize],
    cfg: ArrayView1<'_, f64>,
) -> Result<Array2<f64>> {
    adapter.consistency_f(x, t, y, cfg)
}

/// Free-function form of [`TrigFlowAdapter::euler_sample`].
#[allow(clippy::too_many_arguments)]
pub fn euler_sample_trig<V: VelocityField, R: Rng + ?Sized>(
    adapter: &TrigFlowAdapter<V>,
    n: usize,
    steps: usize,
    y: &[usize],
    cfg: f64,
    rng: &mut R,
    exec: Exec,
) -> Result<Array2<f64>> {
    adapter.euler_sample(n, steps, y, cfg, rng, exec)
}
