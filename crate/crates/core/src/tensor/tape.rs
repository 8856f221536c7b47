//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only record of executed primitives. Every
//! operation only refers to earlier entries, so the tape order is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use crate::error::{dim_err, Error, Result};

use super::array::{dims4, Tensor};
use super::kernels;
use super::scalar::{gemm, ordered_sum, MatView};
use super::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Global,
    /// Non-overlapping square window; must divide both spatial sizes.
    Square(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax { axis: usize },
}

/// Normalization statistics source for [`Tape::batch_norm`].
pub enum BatchNormMode<'a, T> {
    /// Normalize with the batch's own statistics.
    Train { eps: T },
    /// Normalize with externally held running statistics.
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel statistics of a train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (used for running-statistics updates).
    pub var: Vec<T>,
}

/// Probability clamp shared by the cross-entropy style losses.
pub const PROB_EPS: f64 = 1e-7;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: usize,
        window: Option<usize>,
    },
    ChannelMax {
        x: usize,
        argmax: Vec<usize>,
    },
    ChannelAvg(usize),
    Resize {
        x: usize,
        rows: Vec<kernels::Lerp>,
        cols: Vec<kernels::Lerp>,
    },
    Relu(usize),
    Sigmoid(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Sum(usize),
    Mean(usize),
    Bce {
        pred: usize,
        target: Vec<T>,
    },
    CrossEntropy {
        probs: usize,
        target: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::ChannelAvg(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::ChannelMax { x, .. }
            | Op::Resize { x, .. }
            | Op::Softmax { x, .. }
            | Op::Narrow { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Bce { pred, .. } => vec![*pred],
            Op::CrossEntropy { probs, .. } => vec![*probs],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The computation record: an ordered list of executed primitives.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one [`Tape::backward`] sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient buffer for `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut Vec<T> {
    grads[idx].get_or_insert_with(|| vec![T::zero(); len])
}

/// For each flat index of `out`, the flat index of the broadcast source.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        in_strides[d] = if inp[d] == 1 { 0 } else { s };
        s *= inp[d];
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..numel {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += in_strides[d];
            if idx[d] < out[d] {
                break;
            }
            flat -= in_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(dim_err!("broadcast needs equal rank, got {a:?} and {b:?}"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(dim_err!("shapes {a:?} and {b:?} do not broadcast")),
        })
        .collect()
}

/// `(outer, axis_len, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Gradients are only produced for leaves created with
    /// `requires_grad` and for values computed from them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        value.check_finite(name)?;
        let inputs = op.inputs();
        let here = self.nodes.len();
        if inputs.iter().any(|&i| i >= here) {
            return Err(Error::Internal(format!("{name} refers to a later tape entry")));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(here))
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise -------------------------------------------------

    /// Elementwise sum with size-1 broadcasting between equal-rank operands.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a.0, b.0))
    }

    /// Elementwise product with size-1 broadcasting between equal-rank operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a.0, b.0))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (da, db) = (self.val(a), self.val(b));
        if sa == sb {
            let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::from_parts(sa.to_vec(), data));
        }
        let out = broadcast_shape(sa, sb)?;
        let ma = broadcast_map(&out, sa);
        let mb = broadcast_map(&out, sb);
        let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
        Ok(Tensor::from_parts(out, data))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", out, Op::Scale(a.0, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push("add_scalar", out, Op::AddScalar(a.0))
    }

    pub fn activate(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Softmax { axis } => self.softmax(x, axis),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", out, Op::Sigmoid(x.0))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax axis {axis} out of range for shape {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.val(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut mx = src[at(0)];
                for k in 1..len {
                    mx = mx.max(src[at(k)]);
                }
                let mut total = T::zero();
                for k in 0..len {
                    let e = (src[at(k)] - mx).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax { x: x.0, axis })
    }

    // ---- linear algebra ----------------------------------------------

    /// `[M,K] @ [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = match self.shape(a) {
            [m, k] => (*m, *k),
            s => return Err(dim_err!("matmul lhs must be 2-D, got {s:?}")),
        };
        let n = match self.shape(b) {
            [k2, n] if *k2 == k => *n,
            s => return Err(dim_err!("matmul rhs must be [{k}, N], got {s:?}")),
        };
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            MatView::row_major(self.val(a), k),
            MatView::row_major(self.val(b), n),
            T::zero(),
            &mut out,
        );
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a.0, b.0))
    }

    /// Fully-connected layer: `x[N,in] @ w[out,in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = match self.shape(x) {
            [n, d] => (*n, *d),
            s => return Err(dim_err!("linear input must be [N, in], got {s:?}")),
        };
        let dout = match self.shape(w) {
            [o, i] if *i == din => *o,
            s => return Err(dim_err!("linear weight must be [out, {din}], got {s:?}")),
        };
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(dim_err!("linear bias must be [{dout}], got {:?}", self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); n * dout];
        gemm(
            n,
            din,
            dout,
            MatView::row_major(self.val(x), din),
            MatView::transposed(self.val(w), din),
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.val(b);
            for row in out.chunks_mut(dout) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let op = Op::Linear {
            x: x.0,
            w: w.0,
            b: b.map(|b| b.0),
        };
        self.push("linear", Tensor::from_parts(vec![n, dout], out), op)
    }

    /// 2-D cross-correlation (no kernel flip) with zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, ci, h, wd) = dims4(self.shape(x))?;
        let (co, wci, kh, kw) = dims4(self.shape(w))?;
        if wci != ci {
            return Err(dim_err!(
                "conv2d weight expects {wci} input channels, input has {ci}"
            ));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d stride must be positive"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(dim_err!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(dim_err!("conv2d bias must be [{co}], got {:?}", self.shape(b)));
            }
        }
        let geom = kernels::ConvGeom::new(ci, h, wd, kh, kw, stride, pad);
        let (ho, wo) = (geom.out_h, geom.out_w);
        let hw = ho * wo;
        let ckk = geom.col_rows();
        let xs = self.val(x);
        let ws = self.val(w);
        let mut out = vec![T::zero(); n * co * hw];
        let mut col = vec![T::zero(); ckk * hw];
        for s in 0..n {
            let xin = &xs[s * ci * h * wd..(s + 1) * ci * h * wd];
            kernels::im2col(&geom, xin, &mut col);
            gemm(
                co,
                ckk,
                hw,
                MatView::row_major(ws, ckk),
                MatView::row_major(&col, hw),
                T::zero(),
                &mut out[s * co * hw..(s + 1) * co * hw],
            );
        }
        if let Some(b) = b {
            let bias = self.val(b);
            for (k, plane) in out.chunks_mut(hw).enumerate() {
                let bv = bias[k % co];
                plane.iter_mut().for_each(|o| *o += bv);
            }
        }
        let op = Op::Conv2d {
            x: x.0,
            w: w.0,
            b: b.map(|b| b.0),
            stride,
            pad,
        };
        self.push("conv2d", Tensor::from_parts(vec![n, co, ho, wo], out), op)
    }

    // ---- normalization ------------------------------------------------

    /// Per-channel batch normalization of `[N,C,H,W]`.
    ///
    /// Train mode additionally returns the batch statistics so the caller can
    /// update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err!(
                "batch_norm affine parameters must be [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let hw = h * w;
        let m = n * hw;
        let xs = self.val(x);
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                if m == 0 {
                    return Err(dim_err!("batch_norm over an empty batch"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let mf = T::from_f64(m as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for &v in &xs[base..base + hw] {
                            s += v;
                        }
                    }
                    let mu = s / mf;
                    let mut q = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for &v in &xs[base..base + hw] {
                            q += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = q / mf;
                }
                (mean, var, eps, true)
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(dim_err!("batch_norm running statistics must have {c} entries"));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let d = var[ch] + eps;
            if d <= T::zero() || !d.is_finite() {
                return Err(Error::Numeric(format!(
                    "batch_norm channel {ch} has zero variance with eps {eps}"
                )));
            }
            inv_std[ch] = T::one() / d.sqrt();
        }
        let g = self.val(gamma);
        let bt = self.val(beta);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let stats = train.then(|| {
            let corr = if m > 1 {
                T::from_f64(m as f64 / (m - 1) as f64)
            } else {
                T::one()
            };
            BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|&v| v * corr).collect(),
            }
        });
        let op = Op::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            xhat,
            inv_std,
            train,
        };
        let v = self.push("batch_norm", Tensor::from_parts(vec![n, c, h, w], out), op)?;
        Ok((v, stats))
    }

    // ---- pooling -------------------------------------------------------

    /// Spatial pooling. `Window::Global` returns `[N,C,1,1]`.
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, window: Window) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        let (kh, kw) = match window {
            Window::Global => (h, w),
            Window::Square(k) => {
                if k == 0 || k > h || k > w {
                    return Err(dim_err!("pool window {k} exceeds input {h}x{w}"));
                }
                if h % k != 0 || w % k != 0 {
                    return Err(dim_err!("pool window {k} does not divide input {h}x{w}"));
                }
                (k, k)
            }
        };
        let (oh, ow) = (h / kh, w / kw);
        let xs = self.val(x);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0usize; out.len()];
        }
        let mut buf = Vec::with_capacity(kh * kw);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = (plane * oh + oy) * ow + ox;
                    match kind {
                        PoolKind::Max => {
                            let mut best = base + oy * kh * w + ox * kw;
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let i = base + (oy * kh + dy) * w + ox * kw + dx;
                                    if xs[i] > xs[best] {
                                        best = i;
                                    }
                                }
                            }
                            argmax[o] = best;
                            out[o] = xs[best];
                        }
                        PoolKind::Avg => {
                            buf.clear();
                            for dy in 0..kh {
                                let row = base + (oy * kh + dy) * w + ox * kw;
                                buf.extend_from_slice(&xs[row..row + kw]);
                            }
                            out[o] = ordered_sum(&mut buf) / T::from_f64((kh * kw) as f64);
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        match kind {
            PoolKind::Max => self.push("max_pool", value, Op::MaxPool { x: x.0, argmax }),
            PoolKind::Avg => {
                let window = match window {
                    Window::Global => None,
                    Window::Square(k) => Some(k),
                };
                self.push("avg_pool", value, Op::AvgPool { x: x.0, window })
            }
        }
    }

    /// Per-pixel reduction over the channel axis: `[N,C,H,W] -> [N,1,H,W]`.
    pub fn channel_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        let hw = h * w;
        let xs = self.val(x);
        let mut out = vec![T::zero(); n * hw];
        let mut argmax = vec![0usize; if kind == PoolKind::Max { n * hw } else { 0 }];
        let mut buf = Vec::with_capacity(c);
        for b in 0..n {
            for p in 0..hw {
                let at = |ch: usize| (b * c + ch) * hw + p;
                match kind {
                    PoolKind::Max => {
                        let mut best = at(0);
                        for ch in 1..c {
                            if xs[at(ch)] > xs[best] {
                                best = at(ch);
                            }
                        }
                        argmax[b * hw + p] = best;
                        out[b * hw + p] = xs[best];
                    }
                    PoolKind::Avg => {
                        buf.clear();
                        buf.extend((0..c).map(|ch| xs[at(ch)]));
                        out[b * hw + p] = ordered_sum(&mut buf) / T::from_f64(c as f64);
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n, 1, h, w], out);
        match kind {
            PoolKind::Max => self.push("channel_max", value, Op::ChannelMax { x: x.0, argmax }),
            PoolKind::Avg => self.push("channel_avg", value, Op::ChannelAvg(x.0)),
        }
    }

    /// Bilinear resize with corner-aligned sampling.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x))?;
        if out_h == 0 || out_w == 0 {
            return Err(dim_err!("resize target must be positive, got {out_h}x{out_w}"));
        }
        let rows = kernels::lerp_table(h, out_h);
        let cols = kernels::lerp_table(w, out_w);
        let out = if out_h == h && out_w == w {
            self.val(x).to_vec()
        } else {
            kernels::resize_forward(self.val(x), n * c, h, w, &rows, &cols)
        };
        let value = Tensor::from_parts(vec![n, c, out_h, out_w], out);
        self.push("resize_bilinear", value, Op::Resize { x: x.0, rows, cols })
    }

    // ---- shape ---------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(dim_err!("concat: shape {s:?} incompatible with {base:?}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.val(p)[o * len..(o + 1) * len]);
            }
        }
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.0).collect(),
            axis,
        };
        self.push("concat", Tensor::from_parts(shape, out), op)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x.0))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            ));
        }
        let (outer, alen, inner) = split_axis(&shape, axis);
        let xs = self.val(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * alen + start) * inner;
            out.extend_from_slice(&xs[from..from + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let op = Op::Narrow {
            x: x.0,
            axis,
            start,
        };
        self.push("narrow", Tensor::from_parts(oshape, out), op)
    }

    // ---- reductions and losses ------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.val(x).iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_f64(self.val(x).len() as f64);
        let s: T = self.val(x).iter().copied().sum();
        self.push("mean", Tensor::scalar(s / n), Op::Mean(x.0))
    }

    /// Mean binary cross-entropy of probabilities against a constant target.
    ///
    /// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`; the gradient is
    /// evaluated at the clamped value.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(dim_err!(
                "bce target shape {:?} differs from prediction {:?}",
                target.shape(),
                self.shape(pred)
            ));
        }
        let (lo, hi) = clamp_bounds::<T>();
        let p = self.val(pred);
        let mut total = T::zero();
        for (&pv, &y) in p.iter().zip(target.data()) {
            let pc = pv.max(lo).min(hi);
            total -= y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
        }
        let loss = total / T::from_f64(p.len() as f64);
        let op = Op::Bce {
            pred: pred.0,
            target: target.data().to_vec(),
        };
        self.push("bce", Tensor::scalar(loss), op)
    }

    /// Mean over rows of `-sum_k target_k * log(probs_k)` for `[N,K]` inputs.
    pub fn cross_entropy(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        let n = match self.shape(probs) {
            [n, _] => *n,
            s => return Err(dim_err!("cross_entropy expects [N,K] probabilities, got {s:?}")),
        };
        if self.shape(probs) != target.shape() {
            return Err(dim_err!(
                "cross_entropy target shape {:?} differs from {:?}",
                target.shape(),
                self.shape(probs)
            ));
        }
        let (lo, hi) = clamp_bounds::<T>();
        let mut total = T::zero();
        for (&pv, &y) in self.val(probs).iter().zip(target.data()) {
            if y != T::zero() {
                total -= y * pv.max(lo).min(hi).ln();
            }
        }
        let op = Op::CrossEntropy {
            probs: probs.0,
            target: target.data().to_vec(),
        };
        self.push(
            "cross_entropy",
            Tensor::scalar(total / T::from_f64(n as f64)),
            op,
        )
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn numel(&self, i: usize) -> usize {
        self.nodes[i].value.numel()
    }

    fn data(&self, i: usize) -> &[T] {
        self.nodes[i].value.data()
    }

    fn shp(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &src in [*a, *b].iter() {
                    if !self.needs(src) {
                        continue;
                    }
                    let len = self.numel(src);
                    let same = self.shp(src) == out_shape;
                    let map = (!same).then(|| broadcast_map(out_shape, self.shp(src)));
                    let ga = slot(grads, src, len);
                    match map {
                        None => ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v),
                        Some(map) => map.iter().zip(g).for_each(|(&j, &v)| ga[j] += v),
                    }
                }
            }
            Op::Mul(a, b) => {
                for (&src, &other) in [(*a, *b), (*b, *a)].iter().map(|(s, o)| (s, o)) {
                    if !self.needs(src) {
                        continue;
                    }
                    let len = self.numel(src);
                    let ov = self.data(other);
                    if self.shp(src) == out_shape && self.shp(other) == out_shape {
                        let ga = slot(grads, src, len);
                        for ((d, &v), &o) in ga.iter_mut().zip(g).zip(ov) {
                            *d += v * o;
                        }
                    } else {
                        let ms = broadcast_map(out_shape, self.shp(src));
                        let mo = broadcast_map(out_shape, self.shp(other));
                        let ga = slot(grads, src, len);
                        for k in 0..g.len() {
                            ga[ms[k]] += g[k] * ov[mo[k]];
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                if self.needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *f);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if self.needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let xs = self.data(*a);
                    let ga = slot(grads, *a, g.len());
                    for ((d, &v), &x) in ga.iter_mut().zip(g).zip(xs) {
                        if x > T::zero() {
                            *d += v;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let ys = node.value.data();
                    let ga = slot(grads, *a, g.len());
                    for ((d, &v), &y) in ga.iter_mut().zip(g).zip(ys) {
                        *d += v * y * (T::one() - y);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let ys = node.value.data();
                    let (outer, len, inner) = split_axis(out_shape, *axis);
                    let ga = slot(grads, *x, g.len());
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + j;
                            let mut dot = T::zero();
                            for k in 0..len {
                                dot += g[at(k)] * ys[at(k)];
                            }
                            for k in 0..len {
                                ga[at(k)] += ys[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shp(*a)[0], self.shp(*a)[1]);
                let n = self.shp(*b)[1];
                if self.needs(*a) {
                    // dA = G @ B^T
                    let bv = self.data(*b);
                    let ga = slot(grads, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        MatView::row_major(g, n),
                        MatView::transposed(bv, n),
                        T::one(),
                        ga,
                    );
                }
                if self.needs(*b) {
                    // dB = A^T @ G
                    let av = self.data(*a);
                    let gb = slot(grads, *b, k * n);
                    gemm(
                        k,
                        m,
                        n,
                        MatView::transposed(av, k),
                        MatView::row_major(g, n),
                        T::one(),
                        gb,
                    );
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shp(*x)[0], self.shp(*x)[1]);
                let dout = self.shp(*w)[0];
                if self.needs(*x) {
                    // dX = G[N,out] @ W[out,in]
                    let wv = self.data(*w);
                    let gx = slot(grads, *x, n * din);
                    gemm(
                        n,
                        dout,
                        din,
                        MatView::row_major(g, dout),
                        MatView::row_major(wv, din),
                        T::one(),
                        gx,
                    );
                }
                if self.needs(*w) {
                    // dW = G^T[out,N] @ X[N,in]
                    let xv = self.data(*x);
                    let gw = slot(grads, *w, dout * din);
                    gemm(
                        dout,
                        n,
                        din,
                        MatView::transposed(g, dout),
                        MatView::row_major(xv, din),
                        T::one(),
                        gw,
                    );
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb = slot(grads, *b, dout);
                        for row in g.chunks(dout) {
                            gb.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.backprop_conv(*x, *w, *b, *stride, *pad, g, grads)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = dims4(self.shp(*x))?;
                let hw = h * w;
                let m = T::from_f64((n * hw) as f64);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..n {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for k in base..base + hw {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                if self.needs(*gamma) {
                    let gg = slot(grads, *gamma, c);
                    gg.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
                }
                if self.needs(*beta) {
                    let gb = slot(grads, *beta, c);
                    gb.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
                }
                if self.needs(*x) {
                    let gam = self.data(*gamma).to_vec();
                    let gx = slot(grads, *x, g.len());
                    for bi in 0..n {
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            let k_scale = gam[ch] * inv_std[ch];
                            for k in base..base + hw {
                                if *train {
                                    gx[k] += k_scale
                                        * (g[k] - sum_g[ch] / m - xhat[k] * sum_gx[ch] / m);
                                } else {
                                    gx[k] += k_scale * g[k];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } | Op::ChannelMax { x, argmax } => {
                if self.needs(*x) {
                    let len = self.numel(*x);
                    let gx = slot(grads, *x, len);
                    for (&j, &v) in argmax.iter().zip(g) {
                        gx[j] += v;
                    }
                }
            }
            Op::AvgPool { x, window } => {
                if self.needs(*x) {
                    let (n, c, h, w) = dims4(self.shp(*x))?;
                    let (kh, kw) = match window {
                        None => (h, w),
                        Some(k) => (*k, *k),
                    };
                    let (oh, ow) = (h / kh, w / kw);
                    let scale = T::one() / T::from_f64((kh * kw) as f64);
                    let gx = slot(grads, *x, n * c * h * w);
                    for plane in 0..n * c {
                        for yy in 0..h {
                            for xx in 0..w {
                                let o = (plane * oh + yy / kh) * ow + xx / kw;
                                gx[(plane * h + yy) * w + xx] += g[o] * scale;
                            }
                        }
                    }
                }
            }
            Op::ChannelAvg(x) => {
                if self.needs(*x) {
                    let (n, c, h, w) = dims4(self.shp(*x))?;
                    let hw = h * w;
                    let scale = T::one() / T::from_f64(c as f64);
                    let gx = slot(grads, *x, n * c * hw);
                    for bi in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                gx[(bi * c + ch) * hw + p] += g[bi * hw + p] * scale;
                            }
                        }
                    }
                }
            }
            Op::Resize { x, rows, cols } => {
                if self.needs(*x) {
                    let (n, c, h, w) = dims4(self.shp(*x))?;
                    let gx = slot(grads, *x, n * c * h * w);
                    if rows.len() == h && cols.len() == w {
                        gx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                    } else {
                        kernels::resize_backward(g, gx, n * c, h, w, rows, cols);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                let total = out_shape[*axis] * inner;
                for &p in parts {
                    let len = self.shp(p)[*axis] * inner;
                    if self.needs(p) {
                        let plen = self.numel(p);
                        let gp = slot(grads, p, plen);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            gp[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d += v);
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.needs(*x) {
                    let xshape = self.shp(*x).to_vec();
                    let (outer, alen, inner) = split_axis(&xshape, *axis);
                    let len = out_shape[*axis];
                    let gx = slot(grads, *x, xshape.iter().product());
                    for o in 0..outer {
                        let to = (o * alen + start) * inner;
                        let from = o * len * inner;
                        gx[to..to + len * inner]
                            .iter_mut()
                            .zip(&g[from..from + len * inner])
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let len = self.numel(*x);
                    slot(grads, *x, len).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let len = self.numel(*x);
                    let v = g[0] / T::from_f64(len as f64);
                    slot(grads, *x, len).iter_mut().for_each(|d| *d += v);
                }
            }
            Op::Bce { pred, target } => {
                if self.needs(*pred) {
                    let (lo, hi) = clamp_bounds::<T>();
                    let p = self.data(*pred);
                    let scale = g[0] / T::from_f64(p.len() as f64);
                    let gp = slot(grads, *pred, p.len());
                    for ((d, &pv), &y) in gp.iter_mut().zip(p).zip(target) {
                        let pc = pv.max(lo).min(hi);
                        *d += scale * (-y / pc + (T::one() - y) / (T::one() - pc));
                    }
                }
            }
            Op::CrossEntropy { probs, target } => {
                if self.needs(*probs) {
                    let (lo, hi) = clamp_bounds::<T>();
                    let p = self.data(*probs);
                    let n = self.shp(*probs)[0];
                    let scale = g[0] / T::from_f64(n as f64);
                    let gp = slot(grads, *probs, p.len());
                    for ((d, &pv), &y) in gp.iter_mut().zip(p).zip(target) {
                        if y != T::zero() {
                            *d -= scale * y / pv.max(lo).min(hi);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let (n, ci, h, wd) = dims4(self.shp(x))?;
        let (co, _, kh, kw) = dims4(self.shp(w))?;
        let geom = kernels::ConvGeom::new(ci, h, wd, kh, kw, stride, pad);
        let hw = geom.out_h * geom.out_w;
        let ckk = geom.col_rows();
        let xs = self.data(x);
        let ws = self.data(w);
        let plane_in = ci * h * wd;
        if let Some(b) = b {
            if self.needs(b) {
                let gb = slot(grads, b, co);
                for (k, plane) in g.chunks(hw).enumerate() {
                    let mut s = T::zero();
                    for &v in plane {
                        s += v;
                    }
                    gb[k % co] += s;
                }
            }
        }
        let need_w = self.needs(w);
        let need_x = self.needs(x);
        let mut col = vec![T::zero(); ckk * hw];
        let mut gw_acc = if need_w {
            grads[w].take().unwrap_or_else(|| vec![T::zero(); co * ckk])
        } else {
            Vec::new()
        };
        for s in 0..n {
            let gs = &g[s * co * hw..(s + 1) * co * hw];
            if need_w {
                kernels::im2col(&geom, &xs[s * plane_in..(s + 1) * plane_in], &mut col);
                // dW += G_s[co,hw] @ col^T[hw,ckk]
                gemm(
                    co,
                    hw,
                    ckk,
                    MatView::row_major(gs, hw),
                    MatView::transposed(&col, hw),
                    T::one(),
                    &mut gw_acc,
                );
            }
            if need_x {
                // dcol = W^T[ckk,co] @ G_s[co,hw]
                gemm(
                    ckk,
                    co,
                    hw,
                    MatView::transposed(ws, ckk),
                    MatView::row_major(gs, hw),
                    T::zero(),
                    &mut col,
                );
                let gx = slot(grads, x, n * plane_in);
                kernels::col2im_add(&geom, &col, &mut gx[s * plane_in..(s + 1) * plane_in]);
            }
        }
        if need_w {
            grads[w] = Some(gw_acc);
        }
        Ok(())
    }
}

fn clamp_bounds<T: Scalar>() -> (T, T) {
    let lo = T::from_f64(PROB_EPS);
    (lo, T::one() - lo)
}
