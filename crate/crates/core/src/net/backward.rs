use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::forward::{rms_tangent, AttnCache, ForwardCache};
use super::{silu_grad, VelocityNet};

/// Result of a reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Flat gradient in layout order, when requested.
    pub params: Option<Vec<f64>>,
    /// Gradient with respect to the input points.
    pub x: Array2<f64>,
    /// Gradient with respect to the input times, when requested.
    pub t: Option<Array1<f64>>,
}

/// What the reverse pass should produce besides the input gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardOpts {
    pub params: bool,
    pub time: bool,
}

impl BackwardOpts {
    pub const ALL: BackwardOpts = BackwardOpts { params: true, time: true };
    pub const INPUT_ONLY: BackwardOpts = BackwardOpts { params: false, time: false };
}

struct GradSink<'a> {
    net: &'a VelocityNet,
    buf: Option<Vec<f64>>,
}

impl GradSink<'_> {
    fn add_matmul(&mut self, seg: usize, lhs: ArrayView2<'_, f64>, rhs: ArrayView2<'_, f64>) {
        if let Some(buf) = self.buf.as_mut() {
            let mut view = self.net.layout.matrix_mut(buf, seg);
            ndarray::linalg::general_mat_mul(1.0, &lhs.t(), &rhs, 1.0, &mut view);
        }
    }

    fn add_rowsum(&mut self, seg: usize, m: ArrayView2<'_, f64>) {
        if let Some(buf) = self.buf.as_mut() {
            let r = self.net.layout.range(seg);
            for (g, s) in buf[r].iter_mut().zip(m.sum_axis(Axis(0))) {
                *g += s;
            }
        }
    }

    fn slice_mut(&mut self, seg: usize) -> Option<&mut [f64]> {
        let r = self.net.layout.range(seg);
        self.buf.as_mut().map(|b| &mut b[r])
    }
}

impl VelocityNet {
    /// Reverse pass with upstream gradients on the output and, optionally,
    /// on the tapped hidden activations (`d_taps[l]` pairs with `taps()[l]`).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: Option<ArrayView2<'_, f64>>,
        d_taps: &[Option<ArrayView2<'_, f64>>],
        params: bool,
    ) -> Gradients {
        self.backward_with(cache, d_out, d_taps, BackwardOpts { params, time: true })
    }

    pub fn backward_with(
        &self,
        cache: &ForwardCache,
        d_out: Option<ArrayView2<'_, f64>>,
        d_taps: &[Option<ArrayView2<'_, f64>>],
        opts: BackwardOpts,
    ) -> Gradients {
        let idx = &self.idx;
        let batch = cache.batch_size();
        let width = self.config.width;
        let depth = self.config.depth;
        let mut sink = GradSink { net: self, buf: opts.params.then(|| vec![0.0; self.num_params()]) };
        let tap = |l: usize| d_taps.get(l).and_then(|d| d.as_ref());

        let mut dh = Array2::zeros((batch, width));
        if let Some(dout) = d_out {
            sink.add_matmul(idx.out_w, cache.h_final.view(), dout);
            sink.add_rowsum(idx.out_b, dout);
            dh = dout.dot(&self.mat(idx.out_w).t());
            if let Some(ac) = &cache.attn {
                let d_tok = self.attention_backward(ac, &dh, &mut sink);
                dh += &d_tok;
            }
        }

        let mut dcond: Array2<f64> = Array2::zeros((batch, width));
        for l in (0..depth).rev() {
            if let Some(dt) = tap(l) {
                dh += dt;
            }
            let (w, b) = idx.hidden[l];
            let mut du = dh.clone();
            Zip::from(&mut du).and(&cache.u[l]).for_each(|d, &a| *d *= silu_grad(a));
            sink.add_matmul(w, cache.h[l].view(), du.view());
            sink.add_rowsum(b, du.view());
            dcond += &du;
            dh += &du.dot(&self.mat(w).t());
        }

        sink.add_matmul(idx.in_w, cache.x.view(), dh.view());
        sink.add_rowsum(idx.in_b, dh.view());
        let dx = dh.dot(&self.mat(idx.in_w).t());

        let need_cond = opts.params || opts.time;
        let mut dt = None;
        if need_cond {
            let freqs = self.vec1(idx.freqs).to_owned();
            if let Some(table) = sink.slice_mut(idx.class) {
                for (row, &label) in dcond.outer_iter().zip(&cache.y) {
                    let dst = &mut table[label * width..(label + 1) * width];
                    for (g, v) in dst.iter_mut().zip(row) {
                        *g += v;
                    }
                }
            }
            if opts.params {
                sink.add_matmul(idx.cfg_w, cache.e_g.view(), dcond.view());
                sink.add_rowsum(idx.cfg_b, dcond.view());
                let de_g = dcond.dot(&self.mat(idx.cfg_w).t());
                let (_, dfreq) = sinusoid_backward(freqs.view(), cache.c_g.view(), &de_g);
                add_to(sink.slice_mut(idx.freqs), &dfreq);
            }

            sink.add_matmul(idx.t2_w, cache.s1.view(), dcond.view());
            sink.add_rowsum(idx.t2_b, dcond.view());
            let mut da1 = dcond.dot(&self.mat(idx.t2_w).t());
            Zip::from(&mut da1).and(&cache.a1).for_each(|d, &a| *d *= silu_grad(a));
            sink.add_matmul(idx.t1_w, cache.e_t.view(), da1.view());
            sink.add_rowsum(idx.t1_b, da1.view());
            let de_t = da1.dot(&self.mat(idx.t1_w).t());
            let (dc, dfreq) = sinusoid_backward(freqs.view(), cache.c_t.view(), &de_t);
            add_to(sink.slice_mut(idx.freqs), &dfreq);
            if opts.time {
                dt = Some(dc * self.config.c_noise_scale);
            }
        }

        Gradients { params: sink.buf, x: dx, t: dt }
    }

    fn attention_backward(&self, ac: &AttnCache, dh: &Array2<f64>, sink: &mut GradSink<'_>) -> Array2<f64> {
        let [wq, wk, wv, wo] = self.idx.attn.expect("attention segments present");
        let (batch, tokens, dim) = (ac.batch, ac.tokens, ac.dim);
        let da = dh
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch * tokens, dim))
            .expect("contiguous");
        sink.add_matmul(wo, ac.o.view(), da.view());
        let d_o = da.dot(&self.mat(wo).t());

        let inv_sqrt_d = 1.0 / (dim as f64).sqrt();
        let mut dqn = Array2::zeros((batch * tokens, dim));
        let mut dkn = Array2::zeros((batch * tokens, dim));
        let mut dv = Array2::zeros((batch * tokens, dim));
        for b in 0..batch {
            let rows = b * tokens..(b + 1) * tokens;
            let pb = ac.p.index_axis(Axis(0), b);
            let dob = d_o.slice(s![rows.clone(), ..]);
            let vb = ac.v.slice(s![rows.clone(), ..]);
            dv.slice_mut(s![rows.clone(), ..]).assign(&pb.t().dot(&dob));
            let mut dl = dob.dot(&vb.t());
            for (mut drow, prow) in dl.outer_iter_mut().zip(pb.outer_iter()) {
                let mean = prow.dot(&drow);
                Zip::from(&mut drow).and(&prow).for_each(|d, &p| *d = p * (*d - mean));
            }
            dl *= inv_sqrt_d;
            let qb = ac.qn.slice(s![rows.clone(), ..]);
            let kb = ac.kn.slice(s![rows.clone(), ..]);
            dqn.slice_mut(s![rows.clone(), ..]).assign(&dl.dot(&kb));
            dkn.slice_mut(s![rows, ..]).assign(&dl.t().dot(&qb));
        }
        let (dq, dk) = if self.config.qk_norm {
            (rms_tangent(&ac.qn, &ac.rq, &dqn), rms_tangent(&ac.kn, &ac.rk, &dkn))
        } else {
            (dqn, dkn)
        };
        sink.add_matmul(wq, ac.tok.view(), dq.view());
        sink.add_matmul(wk, ac.tok.view(), dk.view());
        sink.add_matmul(wv, ac.tok.view(), dv.view());
        let dtok = dq.dot(&self.mat(wq).t()) + dk.dot(&self.mat(wk).t()) + dv.dot(&self.mat(wv).t());
        dtok.into_shape_with_order((batch, tokens * dim)).expect("contiguous")
    }
}

/// Adjoint of the sinusoid: returns (d/dc per row, d/dfreq).
fn sinusoid_backward(freqs: ArrayView1<'_, f64>, c: ArrayView1<'_, f64>, de: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let f = freqs.len();
    let mut dc = Array1::zeros(c.len());
    let mut dfreq = Array1::zeros(f);
    for (b, &cb) in c.iter().enumerate() {
        let row = de.row(b);
        let mut acc = 0.0;
        for (j, &w) in freqs.iter().enumerate() {
            let (sn, cs) = (w * cb).sin_cos();
            let g = row[j] * cs - row[f + j] * sn;
            acc += g * w;
            dfreq[j] += g * cb;
        }
        dc[b] = acc;
    }
    (dc, dfreq)
}

fn add_to(dst: Option<&mut [f64]>, src: &Array1<f64>) {
    if let Some(d) = dst {
        for (a, b) in d.iter_mut().zip(src) {
            *a += b;
        }
    }
}
