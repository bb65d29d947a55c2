//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every batch. Each primitive appends a node
//! holding its forward value; [`Graph::backward`] walks the node list in
//! reverse (it is topologically ordered by construction) and accumulates
//! adjoints. Parameters are bound by name from a [`ParamStore`] and receive
//! their adjoints through [`Gradients::write_to`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-8;
/// Layer-norm epsilon added to the variance.
pub const LN_EPS: f64 = 1e-5;
/// Rows whose variance falls below this are normalized to zero.
pub const LN_ZERO_VAR: f64 = 1e-12;

/// Per-entry supervision used by the asymmetric loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastLeading(Var),
    Concat0(Vec<Var>),
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    ReduceAxis { x: Var, axis: usize, mean: bool },
    Asl { p: Var, targets: Vec<Target>, gamma_pos: f64, gamma_neg: f64 },
    Contrastive { a: Var, labels: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var, usize)>,
}

impl Gradients {
    /// Adjoint of an arbitrary node, if the loss depends on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }

    /// Writes parameter adjoints into the store's gradient slots. Parameters
    /// bound in the graph but unreachable from the loss receive zeros.
    pub fn write_to(&self, store: &mut ParamStore) -> Result<()> {
        for (name, var, len) in &self.params {
            let grad = self.grads[var.0].clone().unwrap_or_else(|| vec![0.0; *len]);
            store.get_mut(name)?.set_grad(grad)?;
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Sums a gradient of shape `big` down onto the suffix shape `small`.
fn reduce_to_suffix(grad: &[f64], small_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; small_len];
    for chunk in grad.chunks(small_len) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn make(&self, op: &'static str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape, data).map_err(|e| Error::shape(op, format!("node #{}: {e}", self.nodes.len())))
    }

    fn mismatch(&self, op: &'static str, detail: String) -> Error {
        Error::shape(op, format!("node #{}: {detail}", self.nodes.len()))
    }

    /// A constant input; no adjoint is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable input that is not tied to a named parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, true)
    }

    /// Binds a named parameter. Repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Param, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x[..., k] @ w[k, n] -> [..., n]`
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(self.mismatch("matmul", format!("{xs:?} @ {ws:?}")));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).len() / k;
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let value = self.make("matmul", &shape, out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::MatMul(x, w), rg))
    }

    /// Batched matmul over matching leading dims: `[.., m, k] @ [.., k, n]`,
    /// or `[.., m, k] @ [.., n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() < 2 || as_.len() != bs.len() || as_[..as_.len() - 2] != bs[..bs.len() - 2] {
            return Err(self.mismatch("bmm", format!("{as_:?} x {bs:?}")));
        }
        let r = as_.len();
        let (m, k) = (as_[r - 2], as_[r - 1]);
        let (bk, n) = if trans_b { (bs[r - 1], bs[r - 2]) } else { (bs[r - 2], bs[r - 1]) };
        if bk != k {
            return Err(self.mismatch("bmm", format!("inner dims {k} vs {bk} ({as_:?} x {bs:?}, trans_b={trans_b})")));
        }
        let batch: usize = as_[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let asl = &ad[i * m * k..(i + 1) * m * k];
            let bsl = &bd[i * k * n..(i + 1) * k * n];
            let osl = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt_acc(asl, bsl, osl, m, k, n);
            } else {
                gemm_acc(asl, bsl, osl, m, k, n);
            }
        }
        let mut shape = as_[..r - 2].to_vec();
        shape.extend([m, n]);
        let value = self.make("bmm", &shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Bmm { a, b, trans_b }, rg))
    }

    fn broadcast_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if suffix_of(&bs, &as_) {
            let n = bd.len();
            ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % n])).collect()
        } else if suffix_of(&as_, &bs) {
            let n = ad.len();
            bd.iter().enumerate().map(|(i, &y)| f(ad[i % n], y)).collect()
        } else {
            return Err(self.mismatch(op, format!("cannot broadcast {as_:?} with {bs:?}")));
        };
        let shape = if as_.len() >= bs.len() { as_ } else { bs };
        self.make(op, &shape, data)
    }

    /// Elementwise sum; the shorter operand's shape must be a suffix of the longer.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(&shape, data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(self.mismatch(
                "layer_norm",
                format!("affine shapes {:?}/{:?} for input {shape:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xd.len() / n;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            if var >= LN_ZERO_VAR {
                let s = 1.0 / (var + LN_EPS).sqrt();
                rstd[r] = s;
                for j in 0..n {
                    xhat[r * n + j] = (row[j] - mean) * s;
                }
            }
            for j in 0..n {
                out[r * n + j] = xhat[r * n + j] * g[j] + b[j];
            }
        }
        let value = self.make("layer_norm", &shape, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshaped(shape)
            .map_err(|e| self.mismatch("reshape", e.to_string()))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(self.mismatch("permute", format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, perm);
        let value = self.make("permute", &out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn broadcast_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let value = self.make("broadcast_leading", &shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::BroadcastLeading(x), rg))
    }

    /// Concatenation along axis 0.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| self.mismatch("concat0", "no inputs".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(self.mismatch("concat0", format!("trailing shape {:?} vs {tail:?}", &s[1..])));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = self.make("concat0", &shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat0(parts.to_vec()), rg))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(self.mismatch("narrow", format!("axis {axis} range {start}..{} of {shape:?}", start + len)));
        }
        let (outer, mid, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * mid * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = self.make("narrow", &out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    /// Selects rows of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || rows.iter().any(|&r| r >= shape[0]) {
            return Err(self.mismatch("gather_rows", format!("rows {rows:?} of {shape:?}")));
        }
        let d = shape[1];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let value = self.make("gather_rows", &[rows.len(), d], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows(x, rows.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(self.mismatch("reduce_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, mid, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            for v in &mut data {
                *v /= mid as f64;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = self.make("reduce_axis", &out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::ReduceAxis { x, axis, mean }, rg))
    }

    /// Asymmetric focal loss on probabilities, averaged over non-ignored entries.
    pub fn asl(&mut self, p: Var, targets: Vec<Target>, gamma_pos: f64, gamma_neg: f64) -> Result<Var> {
        let pd = self.value(p).data();
        if targets.len() != pd.len() {
            return Err(self.mismatch("asl", format!("{} targets for {} probabilities", targets.len(), pd.len())));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for (&raw, &t) in pd.iter().zip(&targets) {
            if t == Target::Ignore {
                continue;
            }
            if !(0.0..=1.0).contains(&raw) {
                return Err(Error::Probability(raw));
            }
            let q = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
            total += match t {
                Target::Positive => -(1.0 - q).powf(gamma_pos) * q.ln(),
                Target::Negative => -q.powf(gamma_neg) * (1.0 - q).ln(),
                Target::Ignore => unreachable!(),
            };
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(loss), Op::Asl { p, targets, gamma_pos, gamma_neg }, rg))
    }

    /// Multi-label contrastive loss over the rows of `a` (one instance per row).
    ///
    /// `(1/K) * sum_{k,m} (1 - cos(a_k, a_m)) * B_km`, with `B_km = +1` for
    /// equal labels and `-1` otherwise. Zero-norm rows have cosine 0.
    pub fn contrastive(&mut self, a: Var, labels: Vec<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(self.mismatch("contrastive", format!("{} labels for {shape:?}", labels.len())));
        }
        let (k, d) = (shape[0], shape[1]);
        let (unit, _) = unit_rows(self.value(a).data(), k, d);
        let mut total = 0.0;
        for i in 0..k {
            for j in 0..k {
                let cos: f64 = (0..d).map(|c| unit[i * d + c] * unit[j * d + c]).sum();
                let b = if labels[i] == labels[j] { 1.0 } else { -1.0 };
                total += (1.0 - cos) * b;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(total / k as f64), Op::Contrastive { a, labels }, rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|(name, &v)| (name.clone(), v, self.value(v).len()))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, contrib: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], contrib);
            }
        };
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(x, w) => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let xd = self.value(*x).data();
                let m = xd.len() / k;
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm_nt_acc(g, self.value(*w).data(), &mut dx, m, n, k);
                    send(*x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm_tn_acc(xd, g, &mut dw, m, k, n);
                    send(*w, dw);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let as_ = self.shape(*a);
                let r = as_.len();
                let (m, k) = (as_[r - 2], as_[r - 1]);
                let n = if *trans_b { self.shape(*b)[r - 2] } else { self.shape(*b)[r - 1] };
                let batch: usize = as_[..r - 2].iter().product();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let bs = &bd[i * k * n..(i + 1) * k * n];
                        let out = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // da = g[m,n] @ b[n,k]
                            gemm_acc(gs, bs, out, m, n, k);
                        } else {
                            // da = g[m,n] @ b[k,n]^T
                            gemm_nt_acc(gs, bs, out, m, n, k);
                        }
                    }
                    send(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let asl = &ad[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // db[n,k] = g^T[n,m] @ a[m,k]
                            gemm_tn_acc(gs, asl, out, m, n, k);
                        } else {
                            // db[k,n] = a^T[k,m] @ g[m,n]
                            gemm_tn_acc(asl, gs, out, m, k, n);
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (la, lb) = (self.value(*a).len(), self.value(*b).len());
                if self.rg(*a) {
                    send(*a, reduce_to_suffix(g, la));
                }
                if self.rg(*b) {
                    let mut db = reduce_to_suffix(g, lb);
                    if sign < 0.0 {
                        db.iter_mut().for_each(|v| *v = -*v);
                    }
                    send(*b, db);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let (la, lb) = (ad.len(), bd.len());
                if self.rg(*a) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * bd[i % lb]).collect();
                    send(*a, reduce_to_suffix(&full, la));
                }
                if self.rg(*b) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * ad[i % la]).collect();
                    send(*b, reduce_to_suffix(&full, lb));
                }
            }
            Op::Scale(x, s) => send(*x, g.iter().map(|v| v * s).collect()),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(*x, g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect());
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                send(*x, g.iter().zip(xd).map(|(gv, &xv)| gv * gelu_grad(xv)).collect());
            }
            Op::Square(x) => {
                let xd = self.value(*x).data();
                send(*x, g.iter().zip(xd).map(|(gv, xv)| 2.0 * gv * xv).collect());
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.shape(*gamma)[0];
                let gm = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let mut dg = vec![0.0; n];
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    send(*gamma, dg);
                }
                if self.rg(*beta) {
                    send(*beta, reduce_to_suffix(g, n));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, (gr, xr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let s = rstd[r];
                        if s == 0.0 {
                            continue;
                        }
                        let dxhat: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[r * n + j] = s * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, dx) = permute_data(g, node.value.shape(), &inv);
                send(*x, dx);
            }
            Op::BroadcastLeading(x) => {
                let len = self.value(*x).len();
                send(*x, reduce_to_suffix(g, len));
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    send(*p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, mid, inner) = split_at_axis(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; outer * mid * inner];
                for o in 0..outer {
                    let base = o * mid * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, dx);
            }
            Op::GatherRows(x, rows) => {
                let d = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..d {
                        dx[r * d + c] += g[i * d + c];
                    }
                }
                send(*x, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::ReduceAxis { x, axis, mean } => {
                let shape = self.shape(*x);
                let (outer, mid, inner) = split_at_axis(shape, *axis);
                let div = if *mean { mid as f64 } else { 1.0 };
                let mut dx = vec![0.0; outer * mid * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            dx[(o * mid + m) * inner + i] = g[o * inner + i] / div;
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Asl { p, targets, gamma_pos, gamma_neg } => {
                let pd = self.value(*p).data();
                let count = targets.iter().filter(|&&t| t != Target::Ignore).count();
                let mut dp = vec![0.0; pd.len()];
                if count > 0 {
                    let w = g[0] / count as f64;
                    for (i, (&raw, &t)) in pd.iter().zip(targets).enumerate() {
                        if t == Target::Ignore || raw < PROB_EPS || raw > 1.0 - PROB_EPS {
                            continue;
                        }
                        let q = raw;
                        dp[i] = w * match t {
                            Target::Positive => {
                                let lead = if *gamma_pos == 0.0 {
                                    0.0
                                } else {
                                    gamma_pos * (1.0 - q).powf(gamma_pos - 1.0) * q.ln()
                                };
                                lead - (1.0 - q).powf(*gamma_pos) / q
                            }
                            Target::Negative => {
                                let lead = if *gamma_neg == 0.0 {
                                    0.0
                                } else {
                                    -gamma_neg * q.powf(gamma_neg - 1.0) * (1.0 - q).ln()
                                };
                                lead + q.powf(*gamma_neg) / (1.0 - q)
                            }
                            Target::Ignore => unreachable!(),
                        };
                    }
                }
                send(*p, dp);
            }
            Op::Contrastive { a, labels } => {
                let shape = self.shape(*a);
                let (k, d) = (shape[0], shape[1]);
                let (unit, norms) = unit_rows(self.value(*a).data(), k, d);
                let scale = g[0] / k as f64;
                let mut da = vec![0.0; k * d];
                for i in 0..k {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    // dL/du_i = -(2/K) sum_j B_ij u_j
                    let mut du = vec![0.0; d];
                    for j in 0..k {
                        let b = if labels[i] == labels[j] { 1.0 } else { -1.0 };
                        for c in 0..d {
                            du[c] -= 2.0 * scale * b * unit[j * d + c];
                        }
                    }
                    let ui = &unit[i * d..(i + 1) * d];
                    let proj: f64 = du.iter().zip(ui).map(|(x, y)| x * y).sum();
                    for c in 0..d {
                        da[i * d + c] = (du[c] - proj * ui[c]) / norms[i];
                    }
                }
                send(*a, da);
            }
        }
    }
}

fn unit_rows(data: &[f64], k: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut unit = vec![0.0; k * d];
    let mut norms = vec![0.0; k];
    for i in 0..k {
        let row = &data[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms[i] = norm;
        if norm > 0.0 {
            for c in 0..d {
                unit[i * d + c] = row[c] / norm;
            }
        }
    }
    (unit, norms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::eye(2));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x);
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 4], 3.5));
        let gamma = g.constant(Tensor::full(&[4], 2.0));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[1.0, -2.0, 5.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_gradient() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[3.0]));
        let sq = g.square(x);
        let half = g.scale(sq, 0.5);
        let s = g.sum(half);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("node #2"), "{err}");
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[2, 3, 4], 1.0, &mut rng));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
        assert_eq!(g.value(p).at(&[3, 1, 2]), g.value(x).at(&[1, 2, 3]));
    }

    #[test]
    fn param_binds_once() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2]), true);
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unreached_params_get_zero_grads() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::full(&[2], 1.0), true);
        store.insert("bound", Tensor::full(&[2], 1.0), true);
        let mut g = Graph::new();
        let u = g.param(&store, "used").unwrap();
        g.param(&store, "bound").unwrap();
        let s = g.sum(u);
        g.backward(s).unwrap().write_to(&mut store).unwrap();
        assert_eq!(store.get("used").unwrap().grad().unwrap(), &[1.0, 1.0]);
        assert_eq!(store.get("bound").unwrap().grad().unwrap(), &[0.0, 0.0]);
    }
}
