//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! accumulates vector-Jacobian products. Broadcasting is limited to a
//! right-hand operand whose shape equals the trailing axes of the left one.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a custom unary op: `(x, y, dy) -> dx`.
pub type VjpFn<T> = Arc<dyn Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + Send + Sync>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Pick { x: Var, ids: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Abs(Var),
    Mean(Var),
    Sum(Var),
    RmsNorm { x: Var, inv_rms: Vec<T> },
    L2Normalize { x: Var, norms: Vec<T>, guard: T },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Geglu(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    NegSqDist { x: Var, codes: Var, tau: T },
    SteOneHot(Var),
    ArgmaxOneHot(Var),
    Custom { x: Var, name: &'static str, vjp: VjpFn<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::GatherRows { .. } => "gather",
            Op::Pick { .. } => "pick",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::RmsNorm { .. } => "rms_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Attention { .. } => "attention",
            Op::Geglu(..) => "geglu",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::NegSqDist { .. } => "neg_sq_dist",
            Op::SteOneHot(..) => "ste_one_hot",
            Op::ArgmaxOneHot(..) => "argmax_one_hot",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Recording tape. One graph per forward evaluation; not shared across threads.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    checked: bool,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<T: Scalar>(a: T) -> (T, T) {
    // tanh approximation; returns (gelu(a), d gelu / da)
    let half = T::of(0.5);
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let inner = c * (a + k * a * a * a);
    let t = inner.tanh();
    let value = half * a * (T::one() + t);
    let deriv = half * (T::one() + t) + half * a * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * a * a);
    (value, deriv)
}

fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let m = src.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = (x - m).exp();
        s = s + *d;
    }
    let inv = T::one() / s;
    for d in dst.iter_mut() {
        *d = *d * inv;
    }
}

fn trailing_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Scalar> Graph<T> {
    /// Recording graph with finite-value checks at every op boundary.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), checked: true, record: true }
    }

    /// Recording graph without per-op finiteness checks (training loops).
    pub fn unchecked() -> Self {
        Self { nodes: Vec::new(), checked: false, record: true }
    }

    /// Forward-only graph: nothing requires gradients.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), checked: false, record: false }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
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
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        let needs = self.record;
        self.push(value, Op::Leaf, needs)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.record });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn binary_broadcast(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !trailing_broadcast(av.shape(), bv.shape()) || bv.is_empty() {
            return Err(Error::shape(name, format!("{:?} with {:?}", av.shape(), bv.shape())));
        }
        let bl = bv.len();
        let data: Vec<T> = av.data().iter().enumerate().map(|(i, &x)| f(x, bv.data()[i % bl])).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        self.push(out, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|x| x * s);
        let needs = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), needs)
    }

    /// `[m,k] · [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        tensor::gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let needs = self.needs(&[a, b]);
        self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", av.shape())));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let needs = self.needs(&[a]);
        self.push(Tensor::new([n, m], out)?, Op::Transpose(a), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[a.0].value.clone().reshaped(shape.to_vec())?;
        let needs = self.needs(&[a]);
        self.push(out, Op::Reshape(a), needs)
    }

    /// Row lookup: `table[V,d]`, ids -> `[len(ids), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.rank() != 2 {
            return Err(Error::shape("gather", format!("table {:?}", tv.shape())));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape("gather", format!("id {id} out of range {rows}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let needs = self.needs(&[table]);
        self.push(Tensor::new([ids.len(), d], out)?, Op::GatherRows { table, ids: ids.to_vec() }, needs)
    }

    /// Per-row element selection: `x[T,K]`, ids[T] -> `[T]`.
    pub fn pick(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (rows, k) = (xv.rows(), xv.cols());
        if xv.rank() != 2 || ids.len() != rows || ids.iter().any(|&i| i >= k) {
            return Err(Error::shape("pick", format!("{:?} with {} ids", xv.shape(), ids.len())));
        }
        let out: Vec<T> = ids.iter().enumerate().map(|(r, &c)| xv.data()[r * k + c]).collect();
        let needs = self.needs(&[x]);
        self.push(Tensor::new([rows], out)?, Op::Pick { x, ids: ids.to_vec() }, needs)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let mut out = Tensor::zeros(xv.shape().to_vec());
        for r in 0..xv.rows() {
            softmax_row(xv.row(r), out.row_mut(r));
        }
        let needs = self.needs(&[x]);
        self.push(out, Op::Softmax(x), needs)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let lse = tensor::log_sum_exp(xv.row(r));
            for o in out.row_mut(r) {
                *o = *o - lse;
            }
        }
        let needs = self.needs(&[x]);
        self.push(out, Op::LogSoftmax(x), needs)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].value.map(|v| v.ln());
        let needs = self.needs(&[x]);
        self.push(out, Op::Log(x), needs)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].value.map(|v| v.exp());
        let needs = self.needs(&[x]);
        self.push(out, Op::Exp(x), needs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].value.map(|v| v * v);
        let needs = self.needs(&[x]);
        self.push(out, Op::Square(x), needs)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].value.map(|v| v.abs());
        let needs = self.needs(&[x]);
        self.push(out, Op::Abs(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let out = Tensor::scalar(xv.sum() / T::count(xv.len()));
        let needs = self.needs(&[x]);
        self.push(out, Op::Mean(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.nodes[x.0].value.sum());
        let needs = self.needs(&[x]);
        self.push(out, Op::Sum(x), needs)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)` without gain.
    pub fn rms_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let d = T::count(xv.cols());
        let mut out = xv.clone();
        let mut inv = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let ms = xv.row(r).iter().map(|&v| v * v).sum::<T>() / d;
            let s = T::one() / (ms + eps).sqrt();
            for o in out.row_mut(r) {
                *o = *o * s;
            }
            inv.push(s);
        }
        let needs = self.needs(&[x]);
        self.push(out, Op::RmsNorm { x, inv_rms: inv }, needs)
    }

    /// Row-wise `x / (‖x‖ + guard)`.
    pub fn l2_normalize(&mut self, x: Var, guard: T) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = tensor::dot(xv.row(r), xv.row(r)).sqrt();
            let c = T::one() / (n + guard);
            for o in out.row_mut(r) {
                *o = *o * c;
            }
            norms.push(n);
        }
        let needs = self.needs(&[x]);
        self.push(out, Op::L2Normalize { x, norms, guard }, needs)
    }

    /// Multi-head scaled-dot-product self-attention over `[T,d]` projections.
    /// With `causal`, position `i` attends to positions `j <= i` only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        if qv.rank() != 2 || qv.shape() != kv.shape() || qv.shape() != vv.shape() || heads == 0 || qv.cols() % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("q {:?} k {:?} v {:?} heads {heads}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let (t, d) = (qv.rows(), qv.cols());
        let dh = d / heads;
        let scale = T::one() / T::count(dh).sqrt();
        let mut probs = vec![T::zero(); heads * t * t];
        let mut out = vec![T::zero(); t * d];
        let mut qh = vec![T::zero(); t * dh];
        let mut kh = vec![T::zero(); t * dh];
        let mut vh = vec![T::zero(); t * dh];
        let mut oh = vec![T::zero(); t * dh];
        for h in 0..heads {
            split_head(qv.data(), &mut qh, t, d, h, dh);
            split_head(kv.data(), &mut kh, t, d, h, dh);
            split_head(vv.data(), &mut vh, t, d, h, dh);
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let visible = if causal { i + 1 } else { t };
                let row = &mut p[i * t..(i + 1) * t];
                let qi = &qh[i * dh..(i + 1) * dh];
                let mut m = T::neg_infinity();
                for j in 0..visible {
                    row[j] = tensor::dot(qi, &kh[j * dh..(j + 1) * dh]) * scale;
                    m = m.max(row[j]);
                }
                let mut s = T::zero();
                for r in row.iter_mut().take(visible) {
                    *r = (*r - m).exp();
                    s = s + *r;
                }
                let inv = T::one() / s;
                for r in row.iter_mut().take(visible) {
                    *r = *r * inv;
                }
                for r in row.iter_mut().skip(visible) {
                    *r = T::zero();
                }
            }
            oh.iter_mut().for_each(|x| *x = T::zero());
            tensor::gemm_nn(p, &vh, &mut oh, t, t, dh);
            merge_head(&oh, &mut out, t, d, h, dh);
        }
        let needs = self.needs(&[q, k, v]);
        let probs = if needs { probs } else { Vec::new() };
        self.push(Tensor::new([t, d], out)?, Op::Attention { q, k, v, heads, probs }, needs)
    }

    /// `[T, 2m] -> [T, m]`: `gelu(a) ⊙ b` with `a, b` the two halves of each row.
    pub fn geglu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 || xv.cols() % 2 != 0 {
            return Err(Error::shape("geglu", format!("{:?}", xv.shape())));
        }
        let (t, m) = (xv.rows(), xv.cols() / 2);
        let mut out = Vec::with_capacity(t * m);
        for r in 0..t {
            let row = xv.row(r);
            for j in 0..m {
                out.push(gelu_parts(row[j]).0 * row[m + j]);
            }
        }
        let needs = self.needs(&[x]);
        self.push(Tensor::new([t, m], out)?, Op::Geglu(x), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let d = self.nodes[first.0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            if pv.rank() != 2 || pv.cols() != d {
                return Err(Error::shape("concat_rows", format!("{:?} vs width {d}", pv.shape())));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let needs = self.needs(parts);
        self.push(Tensor::new([rows, d], data)?, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 || start > end || end > xv.rows() {
            return Err(Error::shape("slice_rows", format!("{:?}[{start}..{end}]", xv.shape())));
        }
        let d = xv.cols();
        let out = Tensor::new([end - start, d], xv.data()[start * d..end * d].to_vec())?;
        let needs = self.needs(&[x]);
        self.push(out, Op::SliceRows { x, start }, needs)
    }

    /// `[T,c]`, `[K,c]` -> `[T,K]` with entries `-‖x_t - codes_k‖² / tau`.
    pub fn neg_sq_dist(&mut self, x: Var, codes: Var, tau: T) -> Result<Var> {
        let (xv, cv) = (&self.nodes[x.0].value, &self.nodes[codes.0].value);
        if xv.rank() != 2 || cv.rank() != 2 || xv.cols() != cv.cols() || tau <= T::zero() {
            return Err(Error::shape("neg_sq_dist", format!("{:?} vs {:?}, tau {tau}", xv.shape(), cv.shape())));
        }
        let (t, k) = (xv.rows(), cv.rows());
        let mut out = Vec::with_capacity(t * k);
        for i in 0..t {
            let xi = xv.row(i);
            for j in 0..k {
                let d2: T = xi.iter().zip(cv.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum();
                out.push(-d2 / tau);
            }
        }
        let needs = self.needs(&[x, codes]);
        self.push(Tensor::new([t, k], out)?, Op::NegSqDist { x, codes, tau }, needs)
    }

    /// Hard one-hot of the row argmax whose backward pass is the identity
    /// (straight-through estimator).
    pub fn ste_one_hot(&mut self, h: Var) -> Result<Var> {
        let out = one_hot_of(&self.nodes[h.0].value);
        let needs = self.needs(&[h]);
        self.push(out, Op::SteOneHot(h), needs)
    }

    /// Hard one-hot of the row argmax; not differentiable.
    pub fn argmax_one_hot(&mut self, h: Var) -> Result<Var> {
        let out = one_hot_of(&self.nodes[h.0].value);
        let needs = self.needs(&[h]);
        self.push(out, Op::ArgmaxOneHot(h), needs)
    }

    /// Elementwise-or-not unary op with a caller-supplied reverse rule.
    pub fn custom_unary(
        &mut self,
        x: Var,
        name: &'static str,
        forward: impl Fn(&Tensor<T>) -> Tensor<T>,
        vjp: VjpFn<T>,
    ) -> Result<Var> {
        let out = forward(&self.nodes[x.0].value);
        let needs = self.needs(&[x]);
        self.push(out, Op::Custom { x, name, vjp }, needs)
    }

    /// Reverse pass seeded with `(node, cotangent)` pairs.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.nodes[v.0].value.shape() {
                return Err(Error::shape(
                    "backward",
                    format!("cotangent {:?} for node {:?}", g.shape(), self.nodes[v.0].value.shape()),
                ));
            }
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], g.clone());
            }
        }
        let top = seeds.iter().map(|(v, _)| v.0 + 1).max().unwrap_or(0);
        for idx in (0..top).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient of a scalar node with unit cotangent.
    pub fn backward_scalar(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::shape("backward_scalar", format!("{shape:?} is not scalar")));
        }
        self.backward(&[(loss, Tensor::full(shape, T::one()))])
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if self.nodes[v.0].needs_grad {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn reduce_to(&self, g: &Tensor<T>, target: Var) -> Tensor<T> {
        let shape = self.nodes[target.0].value.shape();
        if g.shape() == shape {
            return g.clone();
        }
        let bl: usize = shape.iter().product();
        let mut out = Tensor::zeros(shape.to_vec());
        for (i, &x) in g.data().iter().enumerate() {
            let o = &mut out.data_mut()[i % bl];
            *o = *o + x;
        }
        out
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                if self.nodes[b.0].needs_grad {
                    let gb = self.reduce_to(g, *b);
                    self.send(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                if self.nodes[b.0].needs_grad {
                    let gb = self.reduce_to(&g.map(|x| -x), *b);
                    self.send(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let bl = bv.len();
                if self.nodes[a.0].needs_grad {
                    let data = g.data().iter().enumerate().map(|(i, &x)| x * bv.data()[i % bl]).collect();
                    self.send(grads, *a, Tensor::new(av.shape().to_vec(), data)?);
                }
                if self.nodes[b.0].needs_grad {
                    let data = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    let full = Tensor::new(av.shape().to_vec(), data)?;
                    let gb = self.reduce_to(&full, *b);
                    self.send(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.send(grads, *a, g.map(|x| x * s));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![T::zero(); m * k];
                    tensor::gemm_nt(g.data(), bv.data(), &mut ga, m, n, k);
                    self.send(grads, *a, Tensor::new([m, k], ga)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![T::zero(); k * n];
                    tensor::gemm_tn(av.data(), g.data(), &mut gb, m, k, n);
                    self.send(grads, *b, Tensor::new([k, n], gb)?);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (val.shape()[0], val.shape()[1]);
                let mut out = vec![T::zero(); n * m];
                for j in 0..n {
                    for i in 0..m {
                        out[i * n + j] = g.data()[j * m + i];
                    }
                }
                self.send(grads, *a, Tensor::new([m, n], out)?);
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.send(grads, *a, g.clone().reshaped(shape)?);
            }
            Op::GatherRows { table, ids } => {
                let shape = self.nodes[table.0].value.shape().to_vec();
                let mut out = Tensor::zeros(shape);
                for (r, &id) in ids.iter().enumerate() {
                    tensor::axpy(T::one(), g.row(r), out.row_mut(id));
                }
                self.send(grads, *table, out);
            }
            Op::Pick { x, ids } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let k = shape[1];
                let mut out = Tensor::zeros(shape);
                for (r, &c) in ids.iter().enumerate() {
                    out.data_mut()[r * k + c] = g.data()[r];
                }
                self.send(grads, *x, out);
            }
            Op::Softmax(x) => {
                let mut out = Tensor::zeros(val.shape().to_vec());
                for r in 0..val.rows() {
                    let (y, gr) = (val.row(r), g.row(r));
                    let s = tensor::dot(y, gr);
                    for ((o, &yi), &gi) in out.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yi * (gi - s);
                    }
                }
                self.send(grads, *x, out);
            }
            Op::LogSoftmax(x) => {
                let mut out = Tensor::zeros(val.shape().to_vec());
                for r in 0..val.rows() {
                    let (y, gr) = (val.row(r), g.row(r));
                    let s: T = gr.iter().copied().sum();
                    for ((o, &yi), &gi) in out.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = gi - yi.exp() * s;
                    }
                }
                self.send(grads, *x, out);
            }
            Op::Log(x) => {
                let xv = &self.nodes[x.0].value;
                let data = g.data().iter().zip(xv.data()).map(|(&gi, &xi)| gi / xi).collect();
                self.send(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Exp(x) => {
                let data = g.data().iter().zip(val.data()).map(|(&gi, &yi)| gi * yi).collect();
                self.send(grads, *x, Tensor::new(val.shape().to_vec(), data)?);
            }
            Op::Square(x) => {
                let xv = &self.nodes[x.0].value;
                let two = T::of(2.0);
                let data = g.data().iter().zip(xv.data()).map(|(&gi, &xi)| two * xi * gi).collect();
                self.send(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Abs(x) => {
                let xv = &self.nodes[x.0].value;
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| {
                        if xi > T::zero() {
                            gi
                        } else if xi < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.send(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Mean(x) => {
                let xv = &self.nodes[x.0].value;
                let v = g.item() / T::count(xv.len());
                self.send(grads, *x, Tensor::full(xv.shape().to_vec(), v));
            }
            Op::Sum(x) => {
                let xv = &self.nodes[x.0].value;
                self.send(grads, *x, Tensor::full(xv.shape().to_vec(), g.item()));
            }
            Op::RmsNorm { x, inv_rms } => {
                let d = T::count(val.cols());
                let mut out = Tensor::zeros(val.shape().to_vec());
                for r in 0..val.rows() {
                    let (y, gr) = (val.row(r), g.row(r));
                    let c = tensor::dot(gr, y) / d;
                    let s = inv_rms[r];
                    for ((o, &yi), &gi) in out.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = s * (gi - yi * c);
                    }
                }
                self.send(grads, *x, out);
            }
            Op::L2Normalize { x, norms, guard } => {
                let xv = &self.nodes[x.0].value;
                let mut out = Tensor::zeros(xv.shape().to_vec());
                for r in 0..xv.rows() {
                    let (xr, gr) = (xv.row(r), g.row(r));
                    let n = norms[r];
                    let c = n + *guard;
                    let proj = if n > T::zero() { tensor::dot(gr, xr) / (c * c * n) } else { T::zero() };
                    for ((o, &xi), &gi) in out.row_mut(r).iter_mut().zip(xr).zip(gr) {
                        *o = gi / c - xi * proj;
                    }
                }
                self.send(grads, *x, out);
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, probs, grads)?;
            }
            Op::Geglu(x) => {
                let xv = &self.nodes[x.0].value;
                let (t, m) = (xv.rows(), xv.cols() / 2);
                let mut out = Tensor::zeros(xv.shape().to_vec());
                for r in 0..t {
                    let row = xv.row(r);
                    let gr = g.row(r);
                    let orow = out.row_mut(r);
                    for j in 0..m {
                        let (gv, gd) = gelu_parts(row[j]);
                        orow[j] = gr[j] * row[m + j] * gd;
                        orow[m + j] = gr[j] * gv;
                    }
                }
                self.send(grads, *x, out);
            }
            Op::ConcatRows(parts) => {
                let d = val.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = &self.nodes[p.0].value;
                    let len = pv.rows() * d;
                    if self.nodes[p.0].needs_grad {
                        let slice = g.data()[offset..offset + len].to_vec();
                        self.send(grads, *p, Tensor::new(pv.shape().to_vec(), slice)?);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = &self.nodes[x.0].value;
                let d = xv.cols();
                let mut out = Tensor::zeros(xv.shape().to_vec());
                out.data_mut()[start * d..start * d + g.len()].copy_from_slice(g.data());
                self.send(grads, *x, out);
            }
            Op::NegSqDist { x, codes, tau } => {
                let (xv, cv) = (&self.nodes[x.0].value, &self.nodes[codes.0].value);
                let (t, k, c) = (xv.rows(), cv.rows(), xv.cols());
                let two_over_tau = T::of(2.0) / *tau;
                let mut gx = Tensor::zeros(xv.shape().to_vec());
                let mut gc = Tensor::zeros(cv.shape().to_vec());
                for i in 0..t {
                    for j in 0..k {
                        let w = g.data()[i * k + j] * two_over_tau;
                        if w == T::zero() {
                            continue;
                        }
                        for p in 0..c {
                            let diff = xv.data()[i * c + p] - cv.data()[j * c + p];
                            gx.data_mut()[i * c + p] = gx.data()[i * c + p] - w * diff;
                            gc.data_mut()[j * c + p] = gc.data()[j * c + p] + w * diff;
                        }
                    }
                }
                self.send(grads, *x, gx);
                self.send(grads, *codes, gc);
            }
            Op::SteOneHot(h) => {
                self.send(grads, *h, g.clone());
            }
            Op::ArgmaxOneHot(h) => {
                if self.nodes[h.0].needs_grad {
                    return Err(Error::NonDifferentiable { op: "argmax_one_hot" });
                }
            }
            Op::Custom { x, vjp, .. } => {
                let gx = vjp(&self.nodes[x.0].value, val, g);
                self.send(grads, *x, gx);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<T>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let (t, d) = (qv.rows(), qv.cols());
        let dh = d / heads;
        let scale = T::one() / T::count(dh).sqrt();
        let mut gq = vec![T::zero(); t * d];
        let mut gk = vec![T::zero(); t * d];
        let mut gv = vec![T::zero(); t * d];
        let mut qh = vec![T::zero(); t * dh];
        let mut kh = vec![T::zero(); t * dh];
        let mut vh = vec![T::zero(); t * dh];
        let mut goh = vec![T::zero(); t * dh];
        let mut dp = vec![T::zero(); t * t];
        let mut tmp = vec![T::zero(); t * dh];
        for h in 0..heads {
            split_head(qv.data(), &mut qh, t, d, h, dh);
            split_head(kv.data(), &mut kh, t, d, h, dh);
            split_head(vv.data(), &mut vh, t, d, h, dh);
            split_head(g.data(), &mut goh, t, d, h, dh);
            let p = &probs[h * t * t..(h + 1) * t * t];
            // dV = Pᵀ dO
            tmp.iter_mut().for_each(|x| *x = T::zero());
            tensor::gemm_tn(p, &goh, &mut tmp, t, t, dh);
            merge_head_add(&tmp, &mut gv, t, d, h, dh);
            // dP = dO Vᵀ, then dS = P ⊙ (dP - rowsum(dP ⊙ P))
            dp.iter_mut().for_each(|x| *x = T::zero());
            tensor::gemm_nt(&goh, &vh, &mut dp, t, dh, t);
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dr = &mut dp[i * t..(i + 1) * t];
                let s = tensor::dot(pr, dr);
                for (dv, &pv) in dr.iter_mut().zip(pr) {
                    *dv = pv * (*dv - s) * scale;
                }
            }
            tmp.iter_mut().for_each(|x| *x = T::zero());
            tensor::gemm_nn(&dp, &kh, &mut tmp, t, t, dh);
            merge_head_add(&tmp, &mut gq, t, d, h, dh);
            tmp.iter_mut().for_each(|x| *x = T::zero());
            tensor::gemm_tn(&dp, &qh, &mut tmp, t, t, dh);
            merge_head_add(&tmp, &mut gk, t, d, h, dh);
        }
        self.send(grads, q, Tensor::new([t, d], gq)?);
        self.send(grads, k, Tensor::new([t, d], gk)?);
        self.send(grads, v, Tensor::new([t, d], gv)?);
        Ok(())
    }
}

fn one_hot_of<T: Scalar>(h: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(h.shape().to_vec());
    let k = h.cols();
    for r in 0..h.rows() {
        let id = tensor::argmax(h.row(r));
        out.data_mut()[r * k + id] = T::one();
    }
    out
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn split_head<T: Scalar>(src: &[T], dst: &mut [T], t: usize, d: usize, h: usize, dh: usize) {
    for i in 0..t {
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[i * d + h * dh..i * d + (h + 1) * dh]);
    }
}

fn merge_head<T: Scalar>(src: &[T], dst: &mut [T], t: usize, d: usize, h: usize, dh: usize) {
    for i in 0..t {
        dst[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

fn merge_head_add<T: Scalar>(src: &[T], dst: &mut [T], t: usize, d: usize, h: usize, dh: usize) {
    for i in 0..t {
        tensor::axpy(T::one(), &src[i * dh..(i + 1) * dh], &mut dst[i * d + h * dh..i * d + (h + 1) * dh]);
    }
}
