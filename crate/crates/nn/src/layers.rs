//! Layer definitions shared by the tokenizer and the generator.
//!
//! Each layer stores only [`ParamId`]s. `forward` builds graph nodes for
//! training; `apply`/`step` are the graph-free inference paths. Inference
//! uses fixed-order dot products so a row's result never depends on how
//! many rows are processed together.

use rand::Rng;

use crate::graph::{rope_apply, Graph, Var};
use crate::params::{ParamId, Params};
use crate::{Float, Tensor};

/// Fixed-order dot product.
#[inline]
pub fn dot<S: Float>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// Stored transposed, `[d_out, d_in]`, so inference rows are contiguous.
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Float, R: Rng>(p: &mut Params<S>, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = p.add_normal(format!("{name}.weight"), &[d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng);
        let b = bias.then(|| p.add_zeros(format!("{name}.bias"), &[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<S: Float>(&self, g: &mut Graph<S>, p: &Params<S>, x: Var) -> Var {
        let w = g.param(p, self.w);
        let y = g.matmul_t(x, w, false, true);
        match self.b {
            Some(b) => {
                let b = g.param(p, b);
                g.add_bias(y, b)
            }
            None => y,
        }
    }

    pub fn apply_row<S: Float>(&self, p: &Params<S>, x: &[S], out: &mut [S]) {
        let w = p.get(self.w);
        let bias = self.b.map(|b| p.get(b).data());
        for (o, slot) in out.iter_mut().enumerate().take(self.d_out) {
            let mut v = dot(w.row(o), x);
            if let Some(b) = bias {
                v = v + b[o];
            }
            *slot = v;
        }
    }

    pub fn apply<S: Float>(&self, p: &Params<S>, x: &Tensor<S>) -> Tensor<S> {
        let mut out = Tensor::zeros(&[x.rows(), self.d_out]);
        for r in 0..x.rows() {
            self.apply_row(p, x.row(r), out.row_mut(r));
        }
        out
    }
}

/// Convolution taps relative to the output frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Taps {
    /// `t-(k-1)d .. t`: left context only.
    Causal,
    /// Symmetric around `t`; needs right context.
    Centered,
}

/// Residual gated convolution: `x + W_o (a * sigmoid(b))` with
/// `[a, b] = conv(x)`.
#[derive(Debug, Clone)]
pub struct GatedConv {
    pub conv: Linear,
    pub out: Linear,
    pub offsets: Vec<isize>,
    pub width: usize,
}

impl GatedConv {
    pub fn new<S: Float, R: Rng>(p: &mut Params<S>, name: &str, width: usize, kernel: usize, dilation: usize, taps: Taps, rng: &mut R) -> Self {
        let offsets: Vec<isize> = match taps {
            Taps::Causal => (0..kernel).map(|i| -(((kernel - 1 - i) * dilation) as isize)).collect(),
            Taps::Centered => {
                let half = (kernel / 2) as isize;
                (0..kernel as isize).map(|i| (i - half) * dilation as isize).collect()
            }
        };
        let conv = Linear::new(p, &format!("{name}.conv"), kernel * width, 2 * width, true, rng);
        let out = Linear::new(p, &format!("{name}.out"), width, width, true, rng);
        Self { conv, out, offsets, width }
    }

    /// Frames of left context needed per output frame.
    pub fn left_context(&self) -> usize {
        self.offsets.iter().map(|o| (-o).max(0) as usize).max().unwrap_or(0)
    }

    pub fn right_context(&self) -> usize {
        self.offsets.iter().map(|o| (*o).max(0) as usize).max().unwrap_or(0)
    }

    pub fn forward<S: Float>(&self, g: &mut Graph<S>, p: &Params<S>, x: Var) -> Var {
        let u = g.unfold(x, &self.offsets);
        let h = self.conv.forward(g, p, u);
        let a = g.slice_cols(h, 0, self.width);
        let b = g.slice_cols(h, self.width, self.width);
        let gate = g.sigmoid(b);
        let z = g.mul(a, gate);
        let o = self.out.forward(g, p, z);
        g.add(x, o)
    }

    /// Computes output frames `[start, end)` of a sequence given all input
    /// frames `x` (absolute frame `i` is `x.row(i - x_start)`).
    pub fn apply_range<S: Float>(&self, p: &Params<S>, x: &Tensor<S>, x_start: usize, start: usize, end: usize) -> Tensor<S> {
        let c = self.width;
        let x_end = x_start + x.rows();
        let mut out = Tensor::zeros(&[end - start, c]);
        let mut unf = vec![S::zero(); self.offsets.len() * c];
        let mut h = vec![S::zero(); 2 * c];
        let mut z = vec![S::zero(); c];
        let mut o = vec![S::zero(); c];
        for t in start..end {
            for (j, off) in self.offsets.iter().enumerate() {
                let src = t as isize + off;
                let dst = &mut unf[j * c..(j + 1) * c];
                if src >= x_start as isize && (src as usize) < x_end {
                    dst.copy_from_slice(x.row(src as usize - x_start));
                } else {
                    assert!(src < 0 || src as usize >= x_end, "missing left context for frame {t}");
                    dst.fill(S::zero());
                }
            }
            self.conv.apply_row(p, &unf, &mut h);
            for i in 0..c {
                z[i] = h[i] * (S::one() / (S::one() + (-h[c + i]).exp()));
            }
            self.out.apply_row(p, &z, &mut o);
            let xr = x.row(t - x_start);
            for (i, dst) in out.row_mut(t - start).iter_mut().enumerate() {
                *dst = xr[i] + o[i];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub gain: ParamId,
    pub eps: f64,
}

impl RmsNorm {
    pub fn new<S: Float>(p: &mut Params<S>, name: &str, dim: usize) -> Self {
        Self {
            gain: p.add_ones(format!("{name}.gain"), &[dim]),
            eps: 1e-6,
        }
    }

    pub fn forward<S: Float>(&self, g: &mut Graph<S>, p: &Params<S>, x: Var) -> Var {
        let gain = g.param(p, self.gain);
        g.rms_norm(x, gain, self.eps)
    }

    pub fn apply_row<S: Float>(&self, p: &Params<S>, x: &[S], out: &mut [S]) {
        let gain = p.get(self.gain).data();
        let ms = x.iter().map(|v| *v * *v).sum::<S>() / S::from_f64(x.len() as f64);
        let r = S::one() / (ms + S::from_f64(self.eps)).sqrt();
        for ((o, v), gg) in out.iter_mut().zip(x).zip(gain) {
            *o = *v * r * *gg;
        }
    }
}

/// Pre-norm decoder block: causal self-attention with rotary positions
/// followed by a SwiGLU feed-forward.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: RmsNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm2: RmsNorm,
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
    pub heads: usize,
    pub dim: usize,
    pub rope_base: f64,
}

/// Key/value rows seen so far by one block, rotary already applied to keys.
#[derive(Debug, Clone, Default)]
pub struct KvCache<S> {
    pub keys: Vec<S>,
    pub values: Vec<S>,
    pub len: usize,
}

impl<S: Float> KvCache<S> {
    pub fn clear(&mut self) {
        self.keys.clear();
        self.values.clear();
        self.len = 0;
    }

    /// Drops the first `n` cached positions.
    pub fn truncate_front(&mut self, n: usize, dim: usize) {
        self.keys.drain(..n * dim);
        self.values.drain(..n * dim);
        self.len -= n;
    }
}

impl TransformerBlock {
    pub fn new<S: Float, R: Rng>(p: &mut Params<S>, name: &str, dim: usize, heads: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            norm1: RmsNorm::new(p, &format!("{name}.norm1"), dim),
            wq: Linear::new(p, &format!("{name}.q"), dim, dim, true, rng),
            wk: Linear::new(p, &format!("{name}.k"), dim, dim, true, rng),
            wv: Linear::new(p, &format!("{name}.v"), dim, dim, true, rng),
            wo: Linear::new(p, &format!("{name}.o"), dim, dim, false, rng),
            norm2: RmsNorm::new(p, &format!("{name}.norm2"), dim),
            gate: Linear::new(p, &format!("{name}.gate"), dim, ff, false, rng),
            up: Linear::new(p, &format!("{name}.up"), dim, ff, false, rng),
            down: Linear::new(p, &format!("{name}.down"), ff, dim, false, rng),
            heads,
            dim,
            rope_base: 10000.0,
        }
    }

    /// `positions[i]` is the rotary position of row `i`; attention is causal
    /// within each `(start, len)` block.
    pub fn forward<S: Float>(&self, g: &mut Graph<S>, p: &Params<S>, x: Var, positions: &[usize], blocks: &[(usize, usize)]) -> Var {
        let h = self.norm1.forward(g, p, x);
        let q = self.wq.forward(g, p, h);
        let k = self.wk.forward(g, p, h);
        let v = self.wv.forward(g, p, h);
        let q = g.rope(q, positions, self.heads, self.rope_base);
        let k = g.rope(k, positions, self.heads, self.rope_base);
        let a = g.attention(q, k, v, self.heads, blocks);
        let a = self.wo.forward(g, p, a);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, p, x);
        let gt = self.gate.forward(g, p, h);
        let gt = g.silu(gt);
        let u = self.up.forward(g, p, h);
        let m = g.mul(gt, u);
        let m = self.down.forward(g, p, m);
        g.add(x, m)
    }

    /// One incremental position; appends to `cache` and returns the output row.
    pub fn step<S: Float>(&self, p: &Params<S>, x: &[S], pos: usize, cache: &mut KvCache<S>) -> Vec<S> {
        let d = self.dim;
        let dh = d / self.heads;
        let mut h = vec![S::zero(); d];
        self.norm1.apply_row(p, x, &mut h);
        let mut q = vec![S::zero(); d];
        let mut k = vec![S::zero(); d];
        let mut v = vec![S::zero(); d];
        self.wq.apply_row(p, &h, &mut q);
        self.wk.apply_row(p, &h, &mut k);
        self.wv.apply_row(p, &h, &mut v);
        let q = rope_apply(&Tensor::from_vec(&[1, d], q), &[pos], self.heads, self.rope_base, false).into_vec();
        let k = rope_apply(&Tensor::from_vec(&[1, d], k), &[pos], self.heads, self.rope_base, false).into_vec();
        cache.keys.extend_from_slice(&k);
        cache.values.extend_from_slice(&v);
        cache.len += 1;
        let n = cache.len;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let mut att = vec![S::zero(); d];
        let mut w = vec![S::zero(); n];
        for hd in 0..self.heads {
            let qh = &q[hd * dh..(hd + 1) * dh];
            let mut mx = S::neg_infinity();
            for (j, wj) in w.iter_mut().enumerate() {
                let kj = &cache.keys[j * d + hd * dh..j * d + (hd + 1) * dh];
                *wj = qh.iter().zip(kj).map(|(a, b)| *a * *b).sum::<S>() * scale;
                if *wj > mx {
                    mx = *wj;
                }
            }
            let mut z = S::zero();
            for wj in w.iter_mut() {
                *wj = (*wj - mx).exp();
                z = z + *wj;
            }
            let out = &mut att[hd * dh..(hd + 1) * dh];
            for (j, wj) in w.iter().enumerate() {
                let a = *wj / z;
                let vj = &cache.values[j * d + hd * dh..j * d + (hd + 1) * dh];
                for (o, vv) in out.iter_mut().zip(vj) {
                    *o = *o + a * *vv;
                }
            }
        }
        let mut o = vec![S::zero(); d];
        self.wo.apply_row(p, &att, &mut o);
        let x1: Vec<S> = x.iter().zip(&o).map(|(a, b)| *a + *b).collect();
        self.norm2.apply_row(p, &x1, &mut h);
        let ff = self.gate.d_out;
        let mut gt = vec![S::zero(); ff];
        let mut u = vec![S::zero(); ff];
        self.gate.apply_row(p, &h, &mut gt);
        self.up.apply_row(p, &h, &mut u);
        for (gg, uu) in gt.iter_mut().zip(&u) {
            let s = S::one() / (S::one() + (-*gg).exp());
            *gg = *gg * s * *uu;
        }
        let mut m = vec![S::zero(); d];
        self.down.apply_row(p, &gt, &mut m);
        x1.iter().zip(&m).map(|(a, b)| *a + *b).collect()
    }
}
