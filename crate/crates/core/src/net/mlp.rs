//! Two-layer SiLU perceptron used for discriminator heads and the adaptive
//! loss weight.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::forward::add_bias;
use super::layout::ParamLayout;
use super::{silu, silu_grad};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layout: ParamLayout,
    params: Vec<f64>,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Array2<f64>,
    a: Array2<f64>,
    s: Array2<f64>,
    pub out: Array2<f64>,
}

impl Mlp {
    /// `N(0, 1/fan_in)` hidden weights; output layer scaled by `out_scale`.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, hidden: usize, out_dim: usize, out_scale: f64, rng: &mut R) -> Self {
        let mut layout = ParamLayout::new();
        let w1 = layout.push("w1", &[in_dim, hidden]);
        layout.push("b1", &[hidden]);
        let w2 = layout.push("w2", &[hidden, out_dim]);
        layout.push("b2", &[out_dim]);
        let mut params = vec![0.0; layout.total()];
        let n1 = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("finite std");
        for p in &mut params[layout.range(w1)] {
            *p = n1.sample(rng);
        }
        if out_scale != 0.0 {
            let n2 = Normal::new(0.0, out_scale / (hidden as f64).sqrt()).expect("finite std");
            for p in &mut params[layout.range(w2)] {
                *p = n2.sample(rng);
            }
        }
        Mlp { layout, params, in_dim, hidden, out_dim }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward_cached(x).out
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> MlpCache {
        let l = &self.layout;
        let a = add_bias(x.dot(&l.matrix(&self.params, 0)), l.vector(&self.params, 1));
        let s = a.mapv(silu);
        let out = add_bias(s.dot(&l.matrix(&self.params, 2)), l.vector(&self.params, 3));
        MlpCache { x: x.to_owned(), a, s, out }
    }

    /// Returns (parameter gradient if requested, input gradient).
    pub fn backward(&self, cache: &MlpCache, d_out: ArrayView2<'_, f64>, want_params: bool) -> (Option<Vec<f64>>, Array2<f64>) {
        let l = &self.layout;
        let w2 = l.matrix(&self.params, 2);
        let mut da = d_out.dot(&w2.t());
        Zip::from(&mut da).and(&cache.a).for_each(|d, &a| *d *= silu_grad(a));
        let dx = da.dot(&l.matrix(&self.params, 0).t());
        let grads = want_params.then(|| {
            let mut g = vec![0.0; self.params.len()];
            let gw1 = cache.x.t().dot(&da);
            let gb1 = da.sum_axis(Axis(0));
            let gw2 = cache.s.t().dot(&d_out);
            let gb2 = d_out.sum_axis(Axis(0));
            for (seg, vals) in [(0, gw1.iter()), (2, gw2.iter())] {
                for (dst, v) in g[l.range(seg)].iter_mut().zip(vals) {
                    *dst = *v;
                }
            }
            for (seg, vals) in [(1, gb1), (3, gb2)] {
                for (dst, v) in g[l.range(seg)].iter_mut().zip(vals) {
                    *dst = v;
                }
            }
            g
        });
        (grads, dx)
    }
}
