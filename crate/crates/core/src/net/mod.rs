//! Velocity network `F(x, t, y, cfg)` with hand-written forward-mode and
//! reverse-mode differentiation.
//!
//! Architecture: residual SiLU MLP on a 2-D input. The conditioning vector
//! (time embedding MLP + class embedding + CFG-scale embedding) is added to
//! the pre-activation of every hidden layer. An optional single-head
//! attention block treats the final hidden state as `width / token_dim`
//! tokens, with RMS-normalised queries and keys when `qk_norm` is set.

mod backward;
pub mod checkpoint;
mod forward;
pub mod layout;
pub mod mlp;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use backward::{BackwardOpts, Gradients};
pub use forward::ForwardCache;
pub use layout::{ParamLayout, Segment};

/// Output (and input) dimension of the data.
pub const DATA_DIM: usize = 2;

/// Embedding multiplier applied to the guidance scale before embedding it.
pub const CFG_EMBED_FACTOR: f64 = 0.1;

pub(crate) const RMS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub width: usize,
    pub depth: usize,
    pub num_classes: usize,
    /// Number of sinusoidal frequencies (embedding dimension is twice this).
    pub time_freqs: usize,
    pub attention: bool,
    pub qk_norm: bool,
    pub token_dim: usize,
    /// c_noise(t) = c_noise_scale * t. The dense default of 1 keeps the time
    /// derivative of the output small.
    pub c_noise_scale: f64,
    pub zero_init_output: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            width: 128,
            depth: 4,
            num_classes: 3,
            time_freqs: 64,
            attention: true,
            qk_norm: true,
            token_dim: 16,
            c_noise_scale: 1.0,
            zero_init_output: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.time_freqs == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!("degenerate net config {self:?}")));
        }
        if self.attention && (self.token_dim == 0 || self.width % self.token_dim != 0) {
            return Err(Error::Config(format!(
                "width {} is not a multiple of token_dim {}",
                self.width, self.token_dim
            )));
        }
        if !(self.c_noise_scale > 0.0 && self.c_noise_scale.is_finite()) {
            return Err(Error::Config(format!("invalid c_noise_scale {}", self.c_noise_scale)));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        2 * self.time_freqs
    }

    pub fn tokens(&self) -> usize {
        self.width / self.token_dim
    }
}

/// Indices of each segment in the layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct SegIdx {
    pub freqs: usize,
    pub in_w: usize,
    pub in_b: usize,
    pub t1_w: usize,
    pub t1_b: usize,
    pub t2_w: usize,
    pub t2_b: usize,
    pub class: usize,
    pub cfg_w: usize,
    pub cfg_b: usize,
    pub hidden: Vec<(usize, usize)>,
    pub attn: Option<[usize; 4]>,
    pub out_w: usize,
    pub out_b: usize,
}

fn build_layout(cfg: &NetConfig) -> (ParamLayout, SegIdx) {
    let (w, e) = (cfg.width, cfg.embed_dim());
    let mut l = ParamLayout::new();
    let freqs = l.push("time_freqs", &[cfg.time_freqs]);
    let in_w = l.push("in.w", &[DATA_DIM, w]);
    let in_b = l.push("in.b", &[w]);
    let t1_w = l.push("temb1.w", &[e, w]);
    let t1_b = l.push("temb1.b", &[w]);
    let t2_w = l.push("temb2.w", &[w, w]);
    let t2_b = l.push("temb2.b", &[w]);
    let class = l.push("class_table", &[cfg.num_classes + 1, w]);
    let cfg_w = l.push("cfg.w", &[e, w]);
    let cfg_b = l.push("cfg.b", &[w]);
    let hidden = (0..cfg.depth)
        .map(|i| (l.push(format!("hidden{i}.w"), &[w, w]), l.push(format!("hidden{i}.b"), &[w])))
        .collect();
    let attn = cfg.attention.then(|| {
        let d = cfg.token_dim;
        ["attn.wq", "attn.wk", "attn.wv", "attn.wo"].map(|n| l.push(n, &[d, d]))
    });
    let out_w = l.push("out.w", &[w, DATA_DIM]);
    let out_b = l.push("out.b", &[DATA_DIM]);
    let idx = SegIdx { freqs, in_w, in_b, t1_w, t1_b, t2_w, t2_b, class, cfg_w, cfg_b, hidden, attn, out_w, out_b };
    (l, idx)
}

/// Fixed sinusoidal frequencies, geometric from 1 down to 1e-4
/// (periods from 2π to 2π·1e4).
pub fn default_frequencies(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|j| (-(1e4f64).ln() * j as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    config: NetConfig,
    layout: ParamLayout,
    idx: SegIdx,
    params: Vec<f64>,
}

impl VelocityNet {
    /// Randomly initialised network. Linear weights are `N(0, 1/fan_in)`,
    /// biases zero, CFG-embedding projection zero.
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (layout, idx) = build_layout(&config);
        let mut params = vec![0.0; layout.total()];
        params[layout.range(idx.freqs)].copy_from_slice(&default_frequencies(config.time_freqs));

        let fill = |seg: usize, std: f64, params: &mut [f64], rng: &mut R| {
            let normal = Normal::new(0.0, std).expect("finite std");
            for p in &mut params[layout.range(seg)] {
                *p = normal.sample(rng);
            }
        };
        let w = config.width as f64;
        fill(idx.in_w, 1.0 / (DATA_DIM as f64).sqrt(), &mut params, rng);
        fill(idx.t1_w, 1.0 / (config.embed_dim() as f64).sqrt(), &mut params, rng);
        fill(idx.t2_w, 1.0 / w.sqrt(), &mut params, rng);
        fill(idx.class, 0.5, &mut params, rng);
        for &(hw, _) in &idx.hidden {
            fill(hw, 1.0 / w.sqrt(), &mut params, rng);
        }
        if let Some(a) = idx.attn {
            let d = (config.token_dim as f64).sqrt();
            for seg in a {
                fill(seg, 1.0 / d, &mut params, rng);
            }
        }
        if !config.zero_init_output {
            fill(idx.out_w, 1.0 / w.sqrt(), &mut params, rng);
        }
        Ok(VelocityNet { config, layout, idx, params })
    }

    /// Build from an existing parameter vector; length must match the layout.
    pub fn from_params(config: NetConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (layout, idx) = build_layout(&config);
        if params.len() != layout.total() {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, layout needs {}",
                params.len(),
                layout.total()
            )));
        }
        Ok(VelocityNet { config, layout, idx, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn null_class(&self) -> usize {
        self.config.num_classes
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub(crate) fn mat(&self, seg: usize) -> ArrayView2<'_, f64> {
        self.layout.matrix(&self.params, seg)
    }

    pub(crate) fn vec1(&self, seg: usize) -> ArrayView1<'_, f64> {
        self.layout.vector(&self.params, seg)
    }

    /// Mutable view of a named 2-D segment (used by probes and tests).
    pub fn segment_matrix_mut(&mut self, name: &str) -> Option<ndarray::ArrayViewMut2<'_, f64>> {
        let i = self.layout.find(name)?;
        (self.layout.shape(i).len() == 2).then(|| self.layout.matrix_mut(&mut self.params, i))
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        let i = self.layout.find(name)?;
        Some(&self.params[self.layout.range(i)])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let i = self.layout.find(name)?;
        let r = self.layout.range(i);
        Some(&mut self.params[r])
    }

    /// Optimiser mask: fixed frequencies are never trained; callers may
    /// freeze further segments by prefix.
    pub fn trainable_mask(&self, extra_frozen: &[&str]) -> Vec<bool> {
        let mut frozen = vec!["time_freqs"];
        frozen.extend_from_slice(extra_frozen);
        self.layout.mask_excluding(&frozen)
    }

    pub(crate) fn check_inputs(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
    ) -> Result<()> {
        let b = x.nrows();
        if x.ncols() != DATA_DIM || t.len() != b || y.len() != b || cfg.len() != b {
            return Err(Error::Usage(format!(
                "inconsistent batch shapes: x {:?}, t {}, y {}, cfg {}",
                x.shape(),
                t.len(),
                y.len(),
                cfg.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l > self.null_class()) {
            return Err(Error::Usage(format!("label {bad} exceeds null class {}", self.null_class())));
        }
        if x.iter().chain(t.iter()).chain(cfg.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        Ok(())
    }

    /// Velocity prediction.
    pub fn forward(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x, t, y, cfg)?.out)
    }

    /// Value and directional derivative along `(x_tan, t_tan)`.
    #[allow(clippy::too_many_arguments)]
    pub fn jvp(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
        x_tan: ArrayView2<'_, f64>,
        t_tan: ArrayView1<'_, f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let (cache, tan) = self.forward_dual(x, t, y, cfg, x_tan, t_tan)?;
        Ok((cache.out, tan))
    }

    /// JVP on a [`DualBatch`].
    pub fn jvp_dual(&self, dual: &DualBatch, y: &[usize], cfg: ArrayView1<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.jvp(dual.primal.view(), dual.t_primal.view(), y, cfg, dual.tangent.view(), dual.t_tangent.view())
    }

    /// Primal cache plus output tangent, for callers that also need to backpropagate.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_dual(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
        x_tan: ArrayView2<'_, f64>,
        t_tan: ArrayView1<'_, f64>,
    ) -> Result<(ForwardCache, Array2<f64>)> {
        if x_tan.dim() != x.dim() || t_tan.len() != t.len() {
            return Err(Error::Usage("tangent shapes do not match primal shapes".into()));
        }
        let cache = self.forward_cached(x, t, y, cfg)?;
        let tan = self.tangent_pass(&cache, x_tan, t_tan);
        if tan.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite JVP tangent".into()));
        }
        Ok((cache, tan))
    }

    /// Gradient of a scalar loss of the network output with respect to all
    /// parameters. `loss` receives the output batch and returns
    /// `(value, dloss/doutput)`.
    pub fn grad<F>(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
        loss: F,
    ) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&Array2<f64>) -> (f64, Array2<f64>),
    {
        let cache = self.forward_cached(x, t, y, cfg)?;
        let (value, d_out) = loss(&cache.out);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value}")));
        }
        let g = self.backward(&cache, Some(d_out.view()), &[], true);
        Ok((value, g.params.expect("parameter gradients were requested")))
    }

    /// Norm of d emb(c_noise(t)) / dt for the sinusoidal time embedding,
    /// computed by forward-mode propagation of a unit time tangent.
    pub fn time_embed_sensitivity(&self, t: f64) -> f64 {
        let scale = self.config.c_noise_scale;
        let c = Array1::from_elem(1, scale * t);
        let c_tan = Array1::from_elem(1, scale);
        let (_, tan) = forward::sinusoid_dual(self.vec1(self.idx.freqs), c.view(), c_tan.view());
        tan.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Output of the attention block alone (the residual increment) for a
    /// batch of final hidden states. Errors when the net has no attention.
    pub fn attention_output(&self, hidden: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if self.idx.attn.is_none() {
            return Err(Error::Config("network has no attention block".into()));
        }
        if hidden.ncols() != self.config.width {
            return Err(Error::Usage(format!("hidden width {} != {}", hidden.ncols(), self.config.width)));
        }
        let cache = self.attention_forward(hidden.to_owned());
        Ok(cache.increment())
    }
}

/// Primal and tangent values for forward-mode evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBatch {
    pub primal: Array2<f64>,
    pub tangent: Array2<f64>,
    pub t_primal: Array1<f64>,
    pub t_tangent: Array1<f64>,
}

impl DualBatch {
    pub fn new(primal: Array2<f64>, tangent: Array2<f64>, t_primal: Array1<f64>, t_tangent: Array1<f64>) -> Result<Self> {
        if primal.dim() != tangent.dim() || t_primal.len() != t_tangent.len() || t_primal.len() != primal.nrows() {
            return Err(Error::Usage("dual batch primal/tangent shapes differ".into()));
        }
        Ok(DualBatch { primal, tangent, t_primal, t_tangent })
    }
}

#[inline]
pub(crate) fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

#[inline]
pub(crate) fn silu(a: f64) -> f64 {
    a * sigmoid(a)
}

#[inline]
pub(crate) fn silu_grad(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 + a * (1.0 - s))
}
