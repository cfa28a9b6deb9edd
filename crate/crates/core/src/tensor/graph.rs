//! Wengert-tape reverse-mode differentiation.
//!
//! Operations are recorded in creation order, so a reverse sweep over the
//! node list visits every node after all of its consumers.

use std::collections::HashMap;

use super::gemm::{gemm, MatMut, MatRef};
use super::{axis_split, ParamId, ParamStore, Scalar, Tensor, NORM_EPS};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x (m×n) + y (r×n)` with `y` tiled down the rows; `m % r == 0`.
    AddRows(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    MulConst {
        x: Var,
        factor: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Attention {
        qkv: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<f64>,
    },
    StopGradient,
    StraightThrough {
        continuous: Var,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ReplaceRows {
        x: Var,
        row: Var,
        mask: Vec<bool>,
    },
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRows(..) => "add_rows",
            Op::Affine(..) => "affine",
            Op::Gelu(..) => "gelu",
            Op::MulConst { .. } => "mul_const",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::Attention { .. } => "attention",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::StopGradient => "stop_gradient",
            Op::StraightThrough { .. } => "straight_through",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::SumRows(..) => "sum_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Build one per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf holding `t`. Gradients are tracked only if `requires_grad`.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    /// Binds a stored parameter. Repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.input(p.value().clone(), p.trainable);
        self.params.insert(id, v);
        v
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = Tensor::zeros([m, n]);
        gemm(
            T::one(),
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            T::zero(),
            MatMut::new(out.data_mut(), m, n),
        );
        let ng = self.needs(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let ng = self.needs(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds `y` (r×n, or a length-n vector) to every block of r rows of `x`.
    pub fn add_rows(&mut self, x: Var, y: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let (r, n2) = self.dims(y)?;
        if n != n2 || r == 0 || m % r != 0 {
            return Err(Error::shape("add_rows", self.value(x).shape(), self.value(y).shape()));
        }
        let mut out = self.value(x).clone();
        let yv = self.value(y).data();
        for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
            let off = (i % r) * n;
            for (o, &b) in row.iter_mut().zip(&yv[off..off + n]) {
                *o = *o + b;
            }
        }
        let ng = self.needs(&[x, y]);
        self.push(out, Op::AddRows(x, y), ng)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, b) = (T::of(scale), T::of(shift));
        let out = self.value(x).map(|v| s * v + b);
        let ng = self.needs(&[x]);
        self.push(out, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        let ng = self.needs(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Elementwise product with a constant (e.g. an inverted-dropout mask).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(Error::shape("mul_const", self.value(x).shape(), &[factor.len()]));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&factor)
            .map(|(&v, &f)| v * T::of(f))
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let ng = self.needs(&[x]);
        self.push(out, Op::MulConst { x, factor }, ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (length n).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        for p in [gamma, beta] {
            if self.value(p).len() != n {
                return Err(Error::shape("layer_norm", self.value(x).shape(), self.value(p).shape()));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = Tensor::zeros([m, n]);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            let o = out.row_mut(i);
            for j in 0..n {
                let h = (row[j].as_f64() - mean) * r;
                xhat[i * n + j] = h;
                o[j] = T::of(h) * g[j] + b[j];
            }
        }
        let ng = self.needs(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let mut out = self.value(x).clone().reshape([m, n])?;
        for i in 0..m {
            softmax_in_place(out.row_mut(i));
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `(batch·T) × 3d`, laid out as `[Q | K | V]` column blocks with
    /// heads contiguous inside each block. Returns `(batch·T) × d`.
    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Result<Var> {
        let (rows, c3) = self.dims(qkv)?;
        if batch == 0 || rows % batch != 0 || c3 % 3 != 0 || (c3 / 3) % heads != 0 {
            return Err(Error::InvalidShape {
                shape: self.value(qkv).shape().to_vec(),
                msg: format!("attention with batch {batch}, heads {heads}"),
            });
        }
        let t = rows / batch;
        let d = c3 / 3;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let src = self.value(qkv).data();
        let mut out = Tensor::zeros([rows, d]);
        let mut probs_t = vec![T::zero(); batch * heads * t * t];
        for b in 0..batch {
            let base = b * t * c3;
            for h in 0..heads {
                let p = &mut probs_t[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                let q = MatRef::strided(src, base + h * dh, t, dh, c3, 1);
                let k = MatRef::strided(src, base + d + h * dh, t, dh, c3, 1);
                let v = MatRef::strided(src, base + 2 * d + h * dh, t, dh, c3, 1);
                gemm(scale, q, k.t(), T::zero(), MatMut::new(p, t, t));
                for row in p.chunks_mut(t) {
                    softmax_in_place(row);
                }
                gemm(
                    T::one(),
                    MatRef::new(p, t, t),
                    v,
                    T::zero(),
                    MatMut::strided(out.data_mut(), b * t * d + h * dh, t, dh, d, 1),
                );
            }
        }
        let probs = probs_t.iter().map(|v| v.as_f64()).collect();
        let ng = self.needs(&[qkv]);
        self.push(
            out,
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Unit-normalizes every slice along `axis`; slices under the norm guard are an error.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let mut norms = vec![0.0; outer * inner];
        let mut out = t.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let n = (0..len)
                    .map(|j| t.data()[base + j * inner].as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt();
                if n < NORM_EPS {
                    return Err(Error::DegenerateVector {
                        index: o * inner + i,
                        norm: n,
                        eps: NORM_EPS,
                    });
                }
                norms[o * inner + i] = n;
                let nt = T::of(n);
                for j in 0..len {
                    let p = base + j * inner;
                    out.data_mut()[p] = t.data()[p] / nt;
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::L2Normalize { x, axis, norms }, ng)
    }

    /// Identity in the forward pass; blocks all gradient.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// Forward value is exactly `quantized`; the whole downstream gradient
    /// goes to `continuous` and none to `quantized`. Algebraically this is
    /// `continuous + stop_gradient(quantized - continuous)`.
    pub fn straight_through(&mut self, quantized: Var, continuous: Var) -> Result<Var> {
        self.same_shape("straight_through", quantized, continuous)?;
        let out = self.value(quantized).clone();
        let ng = self.needs(&[continuous]);
        self.push(out, Op::StraightThrough { continuous }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if start + len > m {
            return Err(Error::OutOfRange {
                what: "rows",
                index: start + len,
                size: m,
            });
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new([len, n], data)?;
        let ng = self.needs(&[x]);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let n = self.dims(first)?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if c != n {
                return Err(Error::shape("concat_rows", self.value(first).shape(), self.value(p).shape()));
            }
            data.extend_from_slice(self.value(p).data());
            m += r;
        }
        let out = Tensor::new([m, n], data)?;
        let ng = self.needs(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.needs(&[x]);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(idx)?;
        let ng = self.needs(&[x]);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    /// Rows of `x` where `mask` is set are replaced by `row`.
    pub fn replace_rows(&mut self, x: Var, row: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if mask.len() != m || self.value(row).len() != n {
            return Err(Error::shape("replace_rows", self.value(x).shape(), self.value(row).shape()));
        }
        let mut out = self.value(x).clone().reshape([m, n])?;
        let r = self.value(row).data().to_vec();
        for (i, &masked) in mask.iter().enumerate() {
            if masked {
                out.row_mut(i).copy_from_slice(&r);
            }
        }
        let ng = self.needs(&[x, row]);
        self.push(
            out,
            Op::ReplaceRows {
                x,
                row,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    /// Per-row sums, shape `m × 1`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let xv = self.value(x).data();
        let out = Tensor::from_fn([m, 1], |i| xv[i * n..(i + 1) * n].iter().copied().sum());
        let ng = self.needs(&[x]);
        self.push(out, Op::SumRows(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(&[x]);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let out = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        let ng = self.needs(&[x]);
        self.push(out, Op::Mean(x), ng)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, k) = self.dims(logits)?;
        if m != targets.len() {
            return Err(Error::shape("cross_entropy", self.value(logits).shape(), &[targets.len()]));
        }
        if m == 0 {
            return Err(Error::Empty("cross_entropy"));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; m * k];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::OutOfRange {
                    what: "classes",
                    index: t,
                    size: k,
                });
            }
            let row: Vec<f64> = lv[i * k..(i + 1) * k].iter().map(|v| v.as_f64()).collect();
            let lse = log_sum_exp(&row);
            total += lse - row[t];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(T::of(total / m as f64));
        let ng = self.needs(&[logits]);
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape {
                shape: self.value(loss).shape().to_vec(),
                msg: "backward needs a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| v.0 <= loss.0)
            .map(|(&id, &v)| (id, v))
            .collect();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(g.reshape(shape).expect("gradient matches value size"));
            }
        }
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).cols();
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros([m, k]);
                    gemm(
                        T::one(),
                        MatRef::new(g.data(), m, n),
                        MatRef::new(self.value(*b).data(), k, n).t(),
                        T::zero(),
                        MatMut::new(da.data_mut(), m, k),
                    );
                    self.acc(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros([k, n]);
                    gemm(
                        T::one(),
                        MatRef::new(self.value(*a).data(), m, k).t(),
                        MatRef::new(g.data(), m, n),
                        T::zero(),
                        MatMut::new(db.data_mut(), k, n),
                    );
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, Tensor::new(g.shape().to_vec(), d).unwrap());
                }
            }
            Op::AddRows(x, y) => {
                self.acc(grads, *x, g.clone());
                if self.requires_grad(*y) {
                    let yt = self.value(*y);
                    let (r, n) = yt.dims2().unwrap();
                    let mut dy = Tensor::zeros(yt.shape().to_vec());
                    for (row_i, row) in g.data().chunks(n).enumerate() {
                        let off = (row_i % r) * n;
                        for (d, &v) in dy.data_mut()[off..off + n].iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.acc(grads, *y, dy);
                }
            }
            Op::Affine(x, s) => {
                let s = T::of(*s);
                self.acc(grads, *x, g.map(|v| v * s));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| gv * gelu_grad(v))
                    .collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::MulConst { x, factor } => {
                let d = g.data().iter().zip(factor).map(|(&gv, &f)| gv * T::of(f)).collect();
                self.acc(grads, *x, Tensor::new(g.shape().to_vec(), d).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let gam = self.value(*gamma).data();
                let gd = g.data();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = gd[i * n + j].as_f64();
                            dg[j] += gv * xhat[i * n + j];
                            db[j] += gv;
                        }
                    }
                    let shape = self.value(*gamma).shape().to_vec();
                    self.acc(grads, *gamma, Tensor::from_fn(shape.clone(), |j| T::of(dg[j])));
                    self.acc(grads, *beta, Tensor::from_fn(shape, |j| T::of(db[j])));
                }
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros([m, n]);
                    let nf = n as f64;
                    for i in 0..m {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let dxh = gd[i * n + j].as_f64() * gam[j].as_f64();
                            s1 += dxh;
                            s2 += dxh * xhat[i * n + j];
                        }
                        let row = dx.row_mut(i);
                        for j in 0..n {
                            let dxh = gd[i * n + j].as_f64() * gam[j].as_f64();
                            row[j] = T::of(rstd[i] / nf * (nf * dxh - s1 - xhat[i * n + j] * s2));
                        }
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = Tensor::zeros(y.shape().to_vec());
                for ((dr, yr), gr) in dx
                    .data_mut()
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            } => {
                let src = self.value(*qkv).data();
                let (rows, c3) = self.value(*qkv).dims2().unwrap();
                let (batch, heads) = (*batch, *heads);
                let t = rows / batch;
                let d = c3 / 3;
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let mut dqkv = Tensor::zeros([rows, c3]);
                let mut dp = vec![T::zero(); t * t];
                let mut p = vec![T::zero(); t * t];
                for b in 0..batch {
                    let base = b * t * c3;
                    for h in 0..heads {
                        let off = (b * heads + h) * t * t;
                        for (dst, &s) in p.iter_mut().zip(&probs[off..off + t * t]) {
                            *dst = T::of(s);
                        }
                        let go = MatRef::strided(g.data(), b * t * d + h * dh, t, dh, d, 1);
                        let q = MatRef::strided(src, base + h * dh, t, dh, c3, 1);
                        let k = MatRef::strided(src, base + d + h * dh, t, dh, c3, 1);
                        let v = MatRef::strided(src, base + 2 * d + h * dh, t, dh, c3, 1);
                        // dV = Pᵀ dO
                        gemm(
                            T::one(),
                            MatRef::new(&p, t, t).t(),
                            go,
                            T::zero(),
                            MatMut::strided(dqkv.data_mut(), base + 2 * d + h * dh, t, dh, c3, 1),
                        );
                        // dP = dO Vᵀ, then dS = P ⊙ (dP − rowsum(dP ⊙ P))
                        gemm(T::one(), go, v.t(), T::zero(), MatMut::new(&mut dp, t, t));
                        for (dr, pr) in dp.chunks_mut(t).zip(p.chunks(t)) {
                            let s: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                            for j in 0..t {
                                dr[j] = pr[j] * (dr[j] - s);
                            }
                        }
                        gemm(
                            scale,
                            MatRef::new(&dp, t, t),
                            k,
                            T::zero(),
                            MatMut::strided(dqkv.data_mut(), base + h * dh, t, dh, c3, 1),
                        );
                        gemm(
                            scale,
                            MatRef::new(&dp, t, t).t(),
                            q,
                            T::zero(),
                            MatMut::strided(dqkv.data_mut(), base + d + h * dh, t, dh, c3, 1),
                        );
                    }
                }
                self.acc(grads, *qkv, dqkv);
            }
            Op::L2Normalize { x, axis, norms } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis).unwrap();
                let mut dx = Tensor::zeros(y.shape().to_vec());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let proj: f64 = (0..len)
                            .map(|j| y.data()[base + j * inner].as_f64() * g.data()[base + j * inner].as_f64())
                            .sum();
                        let nrm = norms[o * inner + i];
                        for j in 0..len {
                            let p = base + j * inner;
                            let v = (g.data()[p].as_f64() - y.data()[p].as_f64() * proj) / nrm;
                            dx.data_mut()[p] = T::of(v);
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::StraightThrough { continuous } => {
                self.acc(grads, *continuous, g.clone());
            }
            Op::SliceRows { x, start } => {
                let xt = self.value(*x);
                let n = xt.cols();
                let mut dx = Tensor::zeros(xt.shape().to_vec());
                dx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.acc(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.requires_grad(p) {
                        let part = Tensor::new(self.value(p).shape().to_vec(), g.data()[off..off + len].to_vec());
                        self.acc(grads, p, part.unwrap());
                    }
                    off += len;
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.acc(grads, *x, g.clone().reshape(shape).unwrap());
            }
            Op::GatherRows { x, idx } => {
                let xt = self.value(*x);
                let n = xt.cols();
                let mut dx = Tensor::zeros(xt.shape().to_vec());
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..n {
                        let d = &mut dx.data_mut()[r * n + j];
                        *d = *d + g.data()[k * n + j];
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::ReplaceRows { x, row, mask } => {
                let n = g.cols();
                let mut dx = g.clone();
                let mut drow = vec![T::zero(); n];
                for (i, &masked) in mask.iter().enumerate() {
                    if masked {
                        for (d, &v) in drow.iter_mut().zip(g.row(i)) {
                            *d = *d + v;
                        }
                        dx.row_mut(i).iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                self.acc(grads, *x, dx);
                let shape = self.value(*row).shape().to_vec();
                self.acc(grads, *row, Tensor::new(shape, drow).unwrap());
            }
            Op::SumRows(x) => {
                let xt = self.value(*x);
                let n = xt.cols();
                let dx = Tensor::from_fn(xt.shape().to_vec(), |p| g.data()[p / n]);
                self.acc(grads, *x, dx);
            }
            Op::Sum(x) => {
                let xt = self.value(*x);
                self.acc(grads, *x, Tensor::full(xt.shape().to_vec(), g.data()[0]));
            }
            Op::Mean(x) => {
                let xt = self.value(*x);
                let v = g.data()[0] / T::of(xt.len() as f64);
                self.acc(grads, *x, Tensor::full(xt.shape().to_vec(), v));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let xt = self.value(*logits);
                let k = xt.cols();
                let m = targets.len();
                let up = g.data()[0].as_f64() / m as f64;
                let mut dx = Tensor::zeros(xt.shape().to_vec());
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dx.data_mut()[i * k + j] = T::of((probs[i * k + j] - onehot) * up);
                    }
                }
                self.acc(grads, *logits, dx);
            }
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if any flowed.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zeros when nothing flowed.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.get(*v))
    }

    /// Adds every bound parameter's gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                store.get_mut(id).add_grad(g);
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh(u)` through a single exponential; saturates cleanly to ±1.
fn fast_tanh<T: Scalar>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(0.044715) * x * x * x);
    half * x * (T::one() + fast_tanh(u))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(0.044715) * x * x * x);
    let th = fast_tanh(u);
    half * (T::one() + th) + half * x * (T::one() - th * th) * T::of(GELU_C) * (T::one() + T::of(3.0 * 0.044715) * x * x)
}
