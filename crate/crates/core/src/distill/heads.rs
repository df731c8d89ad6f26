use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::net::mlp::{Mlp, MlpCache};

/// One scalar head per tapped teacher layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorHeads {
    heads: Vec<Mlp>,
}

impl DiscriminatorHeads {
    pub fn new<R: Rng + ?Sized>(count: usize, feature_dim: usize, hidden: usize, rng: &mut R) -> Self {
        DiscriminatorHeads { heads: (0..count).map(|_| Mlp::new(feature_dim, hidden, 1, 1.0, rng)).collect() }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn head(&self, k: usize) -> &Mlp {
        &self.heads[k]
    }

    pub fn head_mut(&mut self, k: usize) -> &mut Mlp {
        &mut self.heads[k]
    }

    /// Forward each head on its feature batch; `out[k]` has one entry per row.
    pub(crate) fn forward_cached(&self, features: &[Array2<f64>]) -> Vec<MlpCache> {
        self.heads.iter().zip(features).map(|(h, f)| h.forward_cached(f.view())).collect()
    }

    /// Parameters of all heads, concatenated.
    pub fn flat_params(&self) -> Vec<f64> {
        self.heads.iter().flat_map(|h| h.params().iter().copied()).collect()
    }
}

/// Scalar log-weight `w(t)`: a two-layer perceptron on fixed sinusoidal
/// features of `t`. The output layer starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveWeight {
    freqs: Vec<f64>,
    mlp: Mlp,
}

impl AdaptiveWeight {
    pub fn new<R: Rng + ?Sized>(n_freqs: usize, hidden: usize, rng: &mut R) -> Self {
        let freqs = if n_freqs == 1 {
            vec![1.0]
        } else {
            (0..n_freqs).map(|j| 32f64.powf(j as f64 / (n_freqs - 1) as f64)).collect()
        };
        AdaptiveWeight { mlp: Mlp::new(2 * n_freqs, hidden, 1, 0.0, rng), freqs }
    }

    pub fn params(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }

    fn embed(&self, t: ArrayView1<'_, f64>) -> Array2<f64> {
        let k = self.freqs.len();
        let mut e = Array2::zeros((t.len(), 2 * k));
        for (i, &ti) in t.iter().enumerate() {
            for (j, &w) in self.freqs.iter().enumerate() {
                e[[i, j]] = (w * ti).sin();
                e[[i, k + j]] = (w * ti).cos();
            }
        }
        e
    }

    pub fn value(&self, t: ArrayView1<'_, f64>) -> Array1<f64> {
        self.mlp.forward(self.embed(t).view()).index_axis_move(Axis(1), 0)
    }

    /// `w(t)` and the parameter gradient of `sum_i d[i] * w(t_i)`, where the
    /// upstream `d` is computed from the values by `d_w`.
    pub fn value_and_grad(&self, t: ArrayView1<'_, f64>, d_w: impl FnOnce(&Array1<f64>) -> Array1<f64>) -> (Array1<f64>, Vec<f64>) {
        let cache = self.mlp.forward_cached(self.embed(t).view());
        let w = cache.out.column(0).to_owned();
        let d = d_w(&w).insert_axis(Axis(1));
        let (g, _) = self.mlp.backward(&cache, d.view(), true);
        (w, g.expect("parameter gradients were requested"))
    }

    /// `mean_i(exp(w(t_i)) l_i - w(t_i))` and its parameter gradient, for
    /// fixed per-sample residuals `l_i`.
    pub fn objective(&self, t: ArrayView1<'_, f64>, l: ArrayView1<'_, f64>) -> (f64, Vec<f64>) {
        let b = t.len() as f64;
        let mut value = 0.0;
        let (_, g) = self.value_and_grad(t, |w| {
            value = w.iter().zip(l).map(|(wi, li)| wi.exp() * li - wi).sum::<f64>() / b;
            w.iter().zip(l).map(|(wi, li)| (wi.exp() * li - 1.0) / b).collect()
        });
        (value, g)
    }
}

pub(crate) fn column(a: ArrayView2<'_, f64>) -> ArrayView1<'_, f64> {
    a.index_axis_move(Axis(1), 0)
}
