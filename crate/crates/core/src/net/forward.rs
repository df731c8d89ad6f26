use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};

use super::{silu, silu_grad, VelocityNet, CFG_EMBED_FACTOR, RMS_EPS};
use crate::error::Result;

/// Every primal intermediate needed by the tangent and reverse passes.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) x: Array2<f64>,
    pub(crate) y: Vec<usize>,
    pub(crate) c_t: Array1<f64>,
    pub(crate) e_t: Array2<f64>,
    pub(crate) a1: Array2<f64>,
    pub(crate) s1: Array2<f64>,
    pub(crate) c_g: Array1<f64>,
    pub(crate) e_g: Array2<f64>,
    /// h[0] = input projection, h[l+1] = residual stream after hidden layer l.
    pub(crate) h: Vec<Array2<f64>>,
    /// Pre-activations of each hidden layer.
    pub(crate) u: Vec<Array2<f64>>,
    pub(crate) attn: Option<AttnCache>,
    pub(crate) h_final: Array2<f64>,
    pub(crate) out: Array2<f64>,
}

impl ForwardCache {
    pub fn out(&self) -> &Array2<f64> {
        &self.out
    }

    pub fn into_out(self) -> Array2<f64> {
        self.out
    }

    /// Hidden activations after each MLP layer (the discriminator taps).
    pub fn taps(&self) -> &[Array2<f64>] {
        &self.h[1..]
    }

    pub fn batch_size(&self) -> usize {
        self.x.nrows()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttnCache {
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
    /// (B*T, d) token matrix (reshaped input hidden state).
    pub tok: Array2<f64>,
    pub v: Array2<f64>,
    pub qn: Array2<f64>,
    pub kn: Array2<f64>,
    pub rq: Array1<f64>,
    pub rk: Array1<f64>,
    /// Softmax weights, (B, T, T).
    pub p: Array3<f64>,
    pub o: Array2<f64>,
    pub a: Array2<f64>,
}

impl AttnCache {
    /// Residual increment in (B, width) layout.
    pub fn increment(&self) -> Array2<f64> {
        self.a
            .clone()
            .into_shape_with_order((self.batch, self.tokens * self.dim))
            .expect("contiguous attention output")
    }
}

/// [sin(w c), cos(w c)] per row.
pub(crate) fn sinusoid(freqs: ArrayView1<'_, f64>, c: ArrayView1<'_, f64>) -> Array2<f64> {
    let f = freqs.len();
    let mut e = Array2::zeros((c.len(), 2 * f));
    for (b, &cb) in c.iter().enumerate() {
        for (j, &w) in freqs.iter().enumerate() {
            let (sn, cs) = (w * cb).sin_cos();
            e[[b, j]] = sn;
            e[[b, f + j]] = cs;
        }
    }
    e
}

/// Sinusoid with a tangent on its argument.
pub(crate) fn sinusoid_dual(
    freqs: ArrayView1<'_, f64>,
    c: ArrayView1<'_, f64>,
    c_tan: ArrayView1<'_, f64>,
) -> (Array2<f64>, Array2<f64>) {
    let f = freqs.len();
    let mut e = Array2::zeros((c.len(), 2 * f));
    let mut de = Array2::zeros((c.len(), 2 * f));
    for (b, (&cb, &db)) in c.iter().zip(c_tan).enumerate() {
        for (j, &w) in freqs.iter().enumerate() {
            let (sn, cs) = (w * cb).sin_cos();
            e[[b, j]] = sn;
            e[[b, f + j]] = cs;
            de[[b, j]] = w * cs * db;
            de[[b, f + j]] = -w * sn * db;
        }
    }
    (e, de)
}

pub(crate) fn add_bias(mut m: Array2<f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    m += &b;
    m
}

fn rms_normalize(m: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = m.ncols() as f64;
    let r: Array1<f64> = m.map_axis(Axis(1), |row| (row.dot(&row) / d + RMS_EPS).sqrt());
    let n = m / &r.view().insert_axis(Axis(1));
    (n, r)
}

/// Tangent (or adjoint: the Jacobian is symmetric) of RMS normalisation.
pub(crate) fn rms_tangent(n: &Array2<f64>, r: &Array1<f64>, dm: &Array2<f64>) -> Array2<f64> {
    let d = n.ncols() as f64;
    let mut out = dm.clone();
    for ((mut o, nrow), &ri) in out.outer_iter_mut().zip(n.outer_iter()).zip(r) {
        let proj = nrow.dot(&o) / d;
        Zip::from(&mut o).and(&nrow).for_each(|ov, &nv| *ov = (*ov - nv * proj) / ri);
    }
    out
}

impl VelocityNet {
    pub(crate) fn forward_cached(
        &self,
        x: ArrayView2<'_, f64>,
        t: ArrayView1<'_, f64>,
        y: &[usize],
        cfg: ArrayView1<'_, f64>,
    ) -> Result<ForwardCache> {
        self.check_inputs(x, t, y, cfg)?;
        let idx = &self.idx;
        let scale = self.config.c_noise_scale;
        let freqs = self.vec1(idx.freqs);

        let c_t = t.mapv(|v| scale * v);
        let e_t = sinusoid(freqs, c_t.view());
        let a1 = add_bias(e_t.dot(&self.mat(idx.t1_w)), self.vec1(idx.t1_b));
        let s1 = a1.mapv(silu);
        let temb = add_bias(s1.dot(&self.mat(idx.t2_w)), self.vec1(idx.t2_b));

        let c_g = cfg.mapv(|g| scale * CFG_EMBED_FACTOR * g);
        let e_g = sinusoid(freqs, c_g.view());
        let mut cond = add_bias(e_g.dot(&self.mat(idx.cfg_w)), self.vec1(idx.cfg_b));
        cond += &temb;
        let table = self.mat(idx.class);
        for (mut row, &label) in cond.outer_iter_mut().zip(y) {
            row += &table.row(label);
        }

        let mut h = Vec::with_capacity(self.config.depth + 1);
        let mut u = Vec::with_capacity(self.config.depth);
        h.push(add_bias(x.dot(&self.mat(idx.in_w)), self.vec1(idx.in_b)));
        for &(w, b) in &idx.hidden {
            let prev = h.last().expect("input projection present");
            let mut pre = add_bias(prev.dot(&self.mat(w)), self.vec1(b));
            pre += &cond;
            let mut next = prev.clone();
            Zip::from(&mut next).and(&pre).for_each(|n, &a| *n += silu(a));
            u.push(pre);
            h.push(next);
        }

        let last = h.last().expect("at least one layer").clone();
        let (attn, h_final) = if idx.attn.is_some() {
            let cache = self.attention_forward(last.clone());
            let mut hf = last;
            hf += &cache.increment();
            (Some(cache), hf)
        } else {
            (None, last)
        };
        let out = add_bias(h_final.dot(&self.mat(idx.out_w)), self.vec1(idx.out_b));

        Ok(ForwardCache {
            x: x.to_owned(),
            y: y.to_vec(),
            c_t,
            e_t,
            a1,
            s1,
            c_g,
            e_g,
            h,
            u,
            attn,
            h_final,
            out,
        })
    }

    pub(crate) fn attention_forward(&self, hidden: Array2<f64>) -> AttnCache {
        let [wq, wk, wv, wo] = self.idx.attn.expect("attention segments present");
        let batch = hidden.nrows();
        let dim = self.config.token_dim;
        let tokens = self.config.tokens();
        let tok = hidden
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch * tokens, dim))
            .expect("width divisible by token_dim");
        let q = tok.dot(&self.mat(wq));
        let k = tok.dot(&self.mat(wk));
        let v = tok.dot(&self.mat(wv));
        let (qn, rq, kn, rk) = if self.config.qk_norm {
            let (qn, rq) = rms_normalize(&q);
            let (kn, rk) = rms_normalize(&k);
            (qn, rq, kn, rk)
        } else {
            let ones = Array1::ones(batch * tokens);
            (q, ones.clone(), k, ones)
        };
        let inv_sqrt_d = 1.0 / (dim as f64).sqrt();
        let mut p = Array3::zeros((batch, tokens, tokens));
        let mut o = Array2::zeros((batch * tokens, dim));
        for b in 0..batch {
            let rows = b * tokens..(b + 1) * tokens;
            let qb = qn.slice(s![rows.clone(), ..]);
            let kb = kn.slice(s![rows.clone(), ..]);
            let mut logits = qb.dot(&kb.t()) * inv_sqrt_d;
            for mut row in logits.outer_iter_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                row.mapv_inplace(|v| (v - m).exp());
                let z = row.sum();
                row /= z;
            }
            o.slice_mut(s![rows.clone(), ..]).assign(&logits.dot(&v.slice(s![rows, ..])));
            p.index_axis_mut(Axis(0), b).assign(&logits);
        }
        let a = o.dot(&self.mat(wo));
        AttnCache { batch, tokens, dim, tok, v, qn, kn, rq, rk, p, o, a }
    }

    /// Forward-mode propagation of `(x_tan, t_tan)` through the cached primal.
    pub(crate) fn tangent_pass(
        &self,
        cache: &ForwardCache,
        x_tan: ArrayView2<'_, f64>,
        t_tan: ArrayView1<'_, f64>,
    ) -> Array2<f64> {
        let idx = &self.idx;
        let scale = self.config.c_noise_scale;
        let c_tan = t_tan.mapv(|v| scale * v);
        let (_, e_tan) = sinusoid_dual(self.vec1(idx.freqs), cache.c_t.view(), c_tan.view());
        let mut a1_tan = e_tan.dot(&self.mat(idx.t1_w));
        Zip::from(&mut a1_tan).and(&cache.a1).for_each(|d, &a| *d *= silu_grad(a));
        // class and CFG embeddings carry no tangent
        let cond_tan = a1_tan.dot(&self.mat(idx.t2_w));

        let mut h_tan = x_tan.dot(&self.mat(idx.in_w));
        for (l, &(w, _)) in idx.hidden.iter().enumerate() {
            let mut u_tan = h_tan.dot(&self.mat(w));
            u_tan += &cond_tan;
            Zip::from(&mut h_tan)
                .and(&u_tan)
                .and(&cache.u[l])
                .for_each(|h, &du, &a| *h += silu_grad(a) * du);
        }

        if let Some(ac) = &cache.attn {
            let inc = self.attention_tangent(ac, &h_tan);
            h_tan += &inc;
        }
        h_tan.dot(&self.mat(idx.out_w))
    }

    fn attention_tangent(&self, ac: &AttnCache, h_tan: &Array2<f64>) -> Array2<f64> {
        let [wq, wk, wv, wo] = self.idx.attn.expect("attention segments present");
        let (batch, tokens, dim) = (ac.batch, ac.tokens, ac.dim);
        let tok_tan = h_tan
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch * tokens, dim))
            .expect("contiguous");
        let q_tan = tok_tan.dot(&self.mat(wq));
        let k_tan = tok_tan.dot(&self.mat(wk));
        let v_tan = tok_tan.dot(&self.mat(wv));
        let (qn_tan, kn_tan) = if self.config.qk_norm {
            (rms_tangent(&ac.qn, &ac.rq, &q_tan), rms_tangent(&ac.kn, &ac.rk, &k_tan))
        } else {
            (q_tan, k_tan)
        };
        let inv_sqrt_d = 1.0 / (dim as f64).sqrt();
        let mut o_tan = Array2::zeros((batch * tokens, dim));
        for b in 0..batch {
            let rows = b * tokens..(b + 1) * tokens;
            let qb = ac.qn.slice(s![rows.clone(), ..]);
            let kb = ac.kn.slice(s![rows.clone(), ..]);
            let dq = qn_tan.slice(s![rows.clone(), ..]);
            let dk = kn_tan.slice(s![rows.clone(), ..]);
            let mut dl = (dq.dot(&kb.t()) + qb.dot(&dk.t())) * inv_sqrt_d;
            let pb = ac.p.index_axis(Axis(0), b);
            // softmax tangent: P * (dL - sum_j P dL)
            for (mut drow, prow) in dl.outer_iter_mut().zip(pb.outer_iter()) {
                let mean = prow.dot(&drow);
                Zip::from(&mut drow).and(&prow).for_each(|d, &p| *d = p * (*d - mean));
            }
            let vb = ac.v.slice(s![rows.clone(), ..]);
            let dvb = v_tan.slice(s![rows.clone(), ..]);
            let ob = dl.dot(&vb) + pb.dot(&dvb);
            o_tan.slice_mut(s![rows, ..]).assign(&ob);
        }
        o_tan
            .dot(&self.mat(wo))
            .into_shape_with_order((batch, tokens * dim))
            .expect("contiguous")
    }
}
