use std::collections::HashMap;

use crate::params::{ParamId, Params};
use crate::tensor::{matmul, Tensor};
use crate::Float;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation whose forward value is computed by the caller and whose
/// backward pass is supplied here. Used for the DSP losses and synthesis
/// layers that are cheaper to differentiate by hand than to compose.
pub trait CustomOp<S: Float> {
    fn backward(&self, inputs: &[&Tensor<S>], output: &Tensor<S>, grad: &Tensor<S>) -> Vec<Option<Tensor<S>>>;
}

/// One embedding contribution: `out[pos] += weight * tables[table][row]`.
#[derive(Debug, Clone, Copy)]
pub struct Lookup<S> {
    pub pos: usize,
    pub table: usize,
    pub row: usize,
    pub weight: S,
}

enum Op<S: Float> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Abs(Var),
    Square(Var),
    Mean(Var),
    Sum(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<S> },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SelectRows { a: Var, idx: Vec<usize> },
    Unfold { x: Var, offsets: Vec<isize> },
    EmbedSum { tables: Vec<Var>, lookups: Vec<Lookup<S>> },
    Attention { q: Var, k: Var, v: Var, heads: usize, blocks: Vec<(usize, usize)>, probs: Vec<S> },
    Rope { x: Var, positions: Vec<usize>, heads: usize, base: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
    StraightThrough(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<S>> },
}

struct Node<S: Float> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Tape of tensor operations for one forward/backward pass.
pub struct Graph<S: Float> {
    nodes: Vec<Node<S>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<S: Float> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Float> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Brings a parameter into the graph; repeated calls return the same node.
    pub fn param(&mut self, params: &Params<S>, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(params.get(id).clone(), Op::Leaf, params.is_trainable(id));
        self.param_vars.insert(id, v);
        v
    }

    /// Detached copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = matmul(self.value(a), self.value(b), ta, tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[m, n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.cols();
        assert_eq!(vb.len(), n, "bias length");
        let mut value = vx.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o = *o + *b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(value, Op::AddBias(x, bias), ng)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let va = self.value(a);
        let value = Tensor::from_vec(va.shape(), va.data().iter().map(|x| *x * c).collect());
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let va = self.value(a);
        let value = Tensor::from_vec(va.shape(), va.data().iter().map(|x| f(*x)).collect());
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = S::from_f64(va.len().max(1) as f64);
        let value = Tensor::scalar(va.data().iter().copied().sum::<S>() / n);
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().copied().sum::<S>());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Row-wise RMS normalisation with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let (vx, vg) = (self.value(x), self.value(gain));
        let n = vx.cols();
        assert_eq!(vg.len(), n);
        let eps = S::from_f64(eps);
        let nf = S::from_f64(n as f64);
        let mut value = vx.clone();
        let mut inv_rms = Vec::with_capacity(vx.rows());
        for row in value.data_mut().chunks_mut(n) {
            let ms = row.iter().map(|v| *v * *v).sum::<S>() / nf;
            let r = S::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            for (o, g) in row.iter_mut().zip(vg.data()) {
                *o = *o * r * *g;
            }
        }
        let ng = self.ng(x) || self.ng(gain);
        self.push(value, Op::RmsNorm { x, gain, inv_rms }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        let ng = self.ng(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let v = self.value(*p);
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                data.extend_from_slice(v.row(r));
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::from_vec(&[rows, total], data), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let rows = va.rows();
        assert!(start + len <= va.cols());
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[rows, len], data), Op::SliceCols { a, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), cols, "concat_rows col mismatch");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::from_vec(&[rows, cols], data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let data = va.data()[start * cols..(start + len) * cols].to_vec();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[len, cols], data), Op::SliceRows { a, start }, ng)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(va.row(i));
        }
        let ng = self.ng(a);
        self.push(
            Tensor::from_vec(&[idx.len(), cols], data),
            Op::SelectRows { a, idx: idx.to_vec() },
            ng,
        )
    }

    /// Row `t` of the output concatenates `x[t + o]` for each offset `o`,
    /// with zeros outside the sequence. Offsets `[-2, -1, 0]` give the input
    /// of a causal kernel-3 convolution.
    pub fn unfold(&mut self, x: Var, offsets: &[isize]) -> Var {
        let vx = self.value(x);
        let (t, c) = (vx.rows(), vx.cols());
        let k = offsets.len();
        let mut out = Tensor::zeros(&[t, k * c]);
        for r in 0..t {
            let orow = out.row_mut(r);
            for (j, &o) in offsets.iter().enumerate() {
                let src = r as isize + o;
                if src >= 0 && (src as usize) < t {
                    orow[j * c..(j + 1) * c].copy_from_slice(vx.row(src as usize));
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Unfold { x, offsets: offsets.to_vec() }, ng)
    }

    pub fn embed_sum(&mut self, tables: &[Var], lookups: Vec<Lookup<S>>, rows: usize) -> Var {
        let cols = self.value(tables[0]).cols();
        let mut out = Tensor::zeros(&[rows, cols]);
        for l in &lookups {
            let src = self.value(tables[l.table]).row(l.row);
            for (o, s) in out.row_mut(l.pos).iter_mut().zip(src) {
                *o = *o + l.weight * *s;
            }
        }
        let ng = tables.iter().any(|t| self.ng(*t));
        self.push(out, Op::EmbedSum { tables: tables.to_vec(), lookups }, ng)
    }

    /// Multi-head scaled dot-product attention, causal within each
    /// `(start, len)` row block. Blocks never attend to each other.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, blocks: &[(usize, usize)]) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (vq.rows(), vq.cols());
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::zeros(&[t, d]);
        let mut probs = Vec::new();
        for &(s, len) in blocks {
            for h in 0..heads {
                let base = probs.len();
                probs.resize(base + len * len, S::zero());
                let p = &mut probs[base..];
                for i in 0..len {
                    let qi = &vq.row(s + i)[h * dh..(h + 1) * dh];
                    let mut mx = S::neg_infinity();
                    for j in 0..=i {
                        let kj = &vk.row(s + j)[h * dh..(h + 1) * dh];
                        let dot: S = qi.iter().zip(kj).map(|(a, b)| *a * *b).sum();
                        let sc = dot * scale;
                        p[i * len + j] = sc;
                        if sc > mx {
                            mx = sc;
                        }
                    }
                    let mut z = S::zero();
                    for j in 0..=i {
                        let e = (p[i * len + j] - mx).exp();
                        p[i * len + j] = e;
                        z = z + e;
                    }
                    let orow = &mut out.row_mut(s + i)[h * dh..(h + 1) * dh];
                    for j in 0..=i {
                        let w = p[i * len + j] / z;
                        p[i * len + j] = w;
                        let vj = &vv.row(s + j)[h * dh..(h + 1) * dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o = *o + w * *x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks: blocks.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Rotary position embedding over adjacent column pairs of each head.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, base: f64) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.rows(), positions.len());
        let value = rope_apply(vx, positions, heads, base, false);
        let ng = self.ng(x);
        self.push(
            value,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                heads,
                base,
            },
            ng,
        )
    }

    /// Mean cross-entropy of `logits[i]` against `targets[i]`. An empty
    /// target list yields 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let vl = self.value(logits);
        let (n, c) = (vl.rows(), vl.cols());
        assert_eq!(n, targets.len(), "cross_entropy rows vs targets");
        let mut probs = vec![S::zero(); n * c];
        let mut total = 0.0f64;
        for (i, &tgt) in targets.iter().enumerate() {
            assert!(tgt < c, "target {tgt} out of range {c}");
            let row = vl.row(i);
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let p = &mut probs[i * c..(i + 1) * c];
            let mut z = S::zero();
            for (pj, x) in p.iter_mut().zip(row) {
                *pj = (*x - mx).exp();
                z = z + *pj;
            }
            for pj in p.iter_mut() {
                *pj = *pj / z;
            }
            total += (mx + z.ln() - row[tgt]).as_f64();
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(S::from_f64(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Forward value `quantized`, gradient passed to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, quantized: Tensor<S>) -> Var {
        assert_eq!(self.value(x).shape(), quantized.shape());
        let ng = self.ng(x);
        self.push(quantized, Op::StraightThrough(x), ng)
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor<S>, op: Box<dyn CustomOp<S>>) -> Var {
        let ng = inputs.iter().any(|v| self.ng(*v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            for (input, dg) in self.local_grads(node, &g) {
                if !self.ng(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&dg),
                    slot @ None => *slot = Some(dg),
                }
            }
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.param_vars.clone(),
        }
    }

    fn local_grads(&self, node: &Node<S>, g: &Tensor<S>) -> Vec<(Var, Tensor<S>)> {
        let val = |v: Var| self.value(v);
        let map = |v: Var, f: &dyn Fn(S, S) -> S| -> Tensor<S> {
            let x = val(v);
            Tensor::from_vec(x.shape(), x.data().iter().zip(g.data()).map(|(a, b)| f(*a, *b)).collect())
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, ta, tb } => {
                let mut r = Vec::new();
                if self.ng(*a) {
                    let da = if !ta {
                        matmul(g, val(*b), false, !tb)
                    } else {
                        matmul(val(*b), g, *tb, true)
                    };
                    r.push((*a, da));
                }
                if self.ng(*b) {
                    let db = if !tb {
                        matmul(val(*a), g, !ta, false)
                    } else {
                        matmul(g, val(*a), true, *ta)
                    };
                    r.push((*b, db));
                }
                r
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, map(*b, &|_, gg| -gg))],
            Op::Mul(a, b) => vec![
                (*a, {
                    let vb = val(*b);
                    Tensor::from_vec(g.shape(), g.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect())
                }),
                (*b, {
                    let va = val(*a);
                    Tensor::from_vec(g.shape(), g.data().iter().zip(va.data()).map(|(x, y)| *x * *y).collect())
                }),
            ],
            Op::AddBias(x, bias) => {
                let n = g.cols();
                let mut db = Tensor::zeros(val(*bias).shape());
                for row in g.data().chunks(n) {
                    for (d, v) in db.data_mut().iter_mut().zip(row) {
                        *d = *d + *v;
                    }
                }
                vec![(*x, g.clone()), (*bias, db)]
            }
            Op::Scale(a, c) => {
                let c = *c;
                vec![(*a, Tensor::from_vec(g.shape(), g.data().iter().map(|v| *v * c).collect()))]
            }
            Op::Tanh(a) => vec![(
                *a,
                Tensor::from_vec(
                    g.shape(),
                    out.data().iter().zip(g.data()).map(|(y, gg)| *gg * (S::one() - *y * *y)).collect(),
                ),
            )],
            Op::Sigmoid(a) => vec![(
                *a,
                Tensor::from_vec(
                    g.shape(),
                    out.data().iter().zip(g.data()).map(|(y, gg)| *gg * *y * (S::one() - *y)).collect(),
                ),
            )],
            Op::Silu(a) => vec![(
                *a,
                map(*a, &|x, gg| {
                    let s = sigmoid(x);
                    gg * s * (S::one() + x * (S::one() - s))
                }),
            )],
            Op::Abs(a) => vec![(
                *a,
                map(*a, &|x, gg| {
                    if x > S::zero() {
                        gg
                    } else if x < S::zero() {
                        -gg
                    } else {
                        S::zero()
                    }
                }),
            )],
            Op::Square(a) => vec![(*a, map(*a, &|x, gg| S::from_f64(2.0) * x * gg))],
            Op::Mean(a) => {
                let va = val(*a);
                let c = g.item() / S::from_f64(va.len().max(1) as f64);
                vec![(*a, Tensor::full(va.shape(), c))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::RmsNorm { x, gain, inv_rms } => {
                let (vx, vg) = (val(*x), val(*gain));
                let n = vx.cols();
                let nf = S::from_f64(n as f64);
                let mut dx = Tensor::zeros(vx.shape());
                let mut dgain = Tensor::zeros(vg.shape());
                for (r, &ir) in inv_rms.iter().enumerate() {
                    let (xr, gr) = (vx.row(r), g.row(r));
                    let mut dot = S::zero();
                    for j in 0..n {
                        dot = dot + gr[j] * vg.data()[j] * xr[j];
                        dgain.data_mut()[j] = dgain.data()[j] + gr[j] * xr[j] * ir;
                    }
                    let c = ir * ir * ir * dot / nf;
                    let dr = dx.row_mut(r);
                    for j in 0..n {
                        dr[j] = ir * gr[j] * vg.data()[j] - c * xr[j];
                    }
                }
                vec![(*x, dx), (*gain, dgain)]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape()))],
            Op::ConcatCols(parts) => {
                let mut off = 0;
                let mut r = Vec::new();
                for p in parts {
                    let w = val(*p).cols();
                    let mut d = Tensor::zeros(val(*p).shape());
                    for row in 0..g.rows() {
                        d.row_mut(row).copy_from_slice(&g.row(row)[off..off + w]);
                    }
                    off += w;
                    r.push((*p, d));
                }
                r
            }
            Op::SliceCols { a, start } => {
                let va = val(*a);
                let mut d = Tensor::zeros(va.shape());
                let w = g.cols();
                for row in 0..g.rows() {
                    d.row_mut(row)[*start..*start + w].copy_from_slice(g.row(row));
                }
                vec![(*a, d)]
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let mut r = Vec::new();
                for p in parts {
                    let n = val(*p).len();
                    let d = Tensor::from_vec(val(*p).shape(), g.data()[off..off + n].to_vec());
                    off += n;
                    r.push((*p, d));
                }
                r
            }
            Op::SliceRows { a, start } => {
                let va = val(*a);
                let mut d = Tensor::zeros(va.shape());
                let c = va.cols();
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*a, d)]
            }
            Op::SelectRows { a, idx } => {
                let mut d = Tensor::zeros(val(*a).shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o = *o + *v;
                    }
                }
                vec![(*a, d)]
            }
            Op::Unfold { x, offsets } => {
                let vx = val(*x);
                let (t, c) = (vx.rows(), vx.cols());
                let mut d = Tensor::zeros(vx.shape());
                for r in 0..t {
                    let grow = g.row(r);
                    for (j, &o) in offsets.iter().enumerate() {
                        let src = r as isize + o;
                        if src >= 0 && (src as usize) < t {
                            for (dd, gg) in d.row_mut(src as usize).iter_mut().zip(&grow[j * c..(j + 1) * c]) {
                                *dd = *dd + *gg;
                            }
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::EmbedSum { tables, lookups } => {
                let mut ds: Vec<Tensor<S>> = tables.iter().map(|t| Tensor::zeros(val(*t).shape())).collect();
                for l in lookups {
                    let grow = g.row(l.pos);
                    for (o, v) in ds[l.table].row_mut(l.row).iter_mut().zip(grow) {
                        *o = *o + l.weight * *v;
                    }
                }
                tables.iter().copied().zip(ds).collect()
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            } => {
                let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                let d = vq.cols();
                let dh = d / heads;
                let scale = S::from_f64(1.0 / (dh as f64).sqrt());
                let mut dq = Tensor::zeros(vq.shape());
                let mut dk = Tensor::zeros(vk.shape());
                let mut dv = Tensor::zeros(vv.shape());
                let mut base = 0;
                let mut dp = Vec::new();
                for &(s, len) in blocks {
                    for h in 0..*heads {
                        let p = &probs[base..base + len * len];
                        base += len * len;
                        dp.clear();
                        dp.resize(len * len, S::zero());
                        for i in 0..len {
                            let go = &g.row(s + i)[h * dh..(h + 1) * dh];
                            let mut rowdot = S::zero();
                            for j in 0..=i {
                                let vj = &vv.row(s + j)[h * dh..(h + 1) * dh];
                                let dpij: S = go.iter().zip(vj).map(|(a, b)| *a * *b).sum();
                                dp[i * len + j] = dpij;
                                rowdot = rowdot + dpij * p[i * len + j];
                                let pij = p[i * len + j];
                                for (o, gg) in dv.row_mut(s + j)[h * dh..(h + 1) * dh].iter_mut().zip(go) {
                                    *o = *o + pij * *gg;
                                }
                            }
                            for j in 0..=i {
                                let ds = p[i * len + j] * (dp[i * len + j] - rowdot) * scale;
                                if ds == S::zero() {
                                    continue;
                                }
                                let kj = &vk.row(s + j)[h * dh..(h + 1) * dh];
                                for (o, x) in dq.row_mut(s + i)[h * dh..(h + 1) * dh].iter_mut().zip(kj) {
                                    *o = *o + ds * *x;
                                }
                                let qi = &vq.row(s + i)[h * dh..(h + 1) * dh];
                                for (o, x) in dk.row_mut(s + j)[h * dh..(h + 1) * dh].iter_mut().zip(qi) {
                                    *o = *o + ds * *x;
                                }
                            }
                        }
                    }
                }
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::Rope {
                x,
                positions,
                heads,
                base,
            } => vec![(*x, rope_apply(g, positions, *heads, *base, true))],
            Op::CrossEntropy { logits, targets, probs } => {
                let vl = val(*logits);
                let (n, c) = (vl.rows(), vl.cols());
                if n == 0 {
                    return vec![];
                }
                let scale = g.item() / S::from_f64(n as f64);
                let mut d = Tensor::from_vec(vl.shape(), probs.clone());
                for (i, &t) in targets.iter().enumerate() {
                    d.data_mut()[i * c + t] = d.data()[i * c + t] - S::one();
                }
                for v in d.data_mut() {
                    *v = *v * scale;
                }
                vec![(*logits, d)]
            }
            Op::StraightThrough(x) => vec![(*x, g.clone())],
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<S>> = inputs.iter().map(|v| val(*v)).collect();
                op.backward(&ins, out, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(d, v)| d.map(|d| (*v, d)))
                    .collect()
            }
        }
    }
}

fn sigmoid<S: Float>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Rotates column pairs `(2i, 2i+1)` within each head by `pos * base^(-2i/dh)`.
pub fn rope_apply<S: Float>(x: &Tensor<S>, positions: &[usize], heads: usize, base: f64, inverse: bool) -> Tensor<S> {
    let d = x.cols();
    let dh = d / heads;
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..dh / 2 {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / dh as f64);
            let (s, c) = theta.sin_cos();
            let (s, c) = (S::from_f64(if inverse { -s } else { s }), S::from_f64(c));
            for h in 0..heads {
                let j = h * dh + 2 * i;
                let (a, b) = (row[j], row[j + 1]);
                row[j] = a * c - b * s;
                row[j + 1] = a * s + b * c;
            }
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients<S: Float> {
    grads: Vec<Option<Tensor<S>>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Float> Gradients<S> {
    pub fn of(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id).and_then(|v| self.of(*v))
    }
}
