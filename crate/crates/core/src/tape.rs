//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order of the computation graph. [`Tape::backward`] walks the
//! records once in reverse, so each op is visited exactly once.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{self, AttentionPlan};
use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::real::{gemm, Real, Strided};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    Upsample2x(Var),
    ChwToRows(Var),
    RowsToChw(Var),
    StopGradient,
    StraightThrough(Var),
    IndexRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        plan: Arc<AttentionPlan>,
        probs: Vec<T>,
    },
    DiffW(Var),
    DiffH(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |p, q| p + q);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |p, q| p - q);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |p, q| p * q);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    /// Adds `bias` (length = last dimension) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap_or(&0);
        if self.value(bias).len() != cols {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let data = xv.data().iter().enumerate().map(|(i, &v)| v + b[i % cols]).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x @ w + b` for a 2-D `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_value, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_value, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// Forward value `quantized`, backward copies the incoming gradient to `x`.
    pub fn straight_through(&mut self, x: Var, quantized: Tensor<T>) -> Result<Var> {
        if quantized.shape() != self.shape(x) {
            return Err(Error::shape("straight_through", self.shape(x), quantized.shape()));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(quantized, Op::StraightThrough(x), rg))
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = *xv.shape().last().unwrap_or(&1);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Normalises each row of a 2-D tensor, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("layer_norm")?;
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let n = T::from_usize(cols).unwrap();
        let (xv, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); rows * cols];
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * rstd * g[c] + b[c];
            }
            rstds.push(rstd);
        }
        let value = Tensor::from_parts(vec![rows, cols], out);
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd: rstds,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / T::from_usize(v.len()).unwrap());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// 2-D convolution of `[N, C, H, W]` (or `[C, H, W]`) input with weights
    /// `[O, C, kh, kw]` and optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (value, cols) = conv::forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    /// Nearest-neighbour 2× upsampling of the last two dimensions.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let value = conv::upsample2x(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    /// `[N, C, H, W]` → `[N·H·W, C]`: one row per spatial cell.
    pub fn chw_to_rows(&mut self, x: Var) -> Result<Var> {
        let value = conv::chw_to_rows(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::ChwToRows(x), rg))
    }

    /// Inverse of [`Tape::chw_to_rows`].
    pub fn rows_to_chw(&mut self, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let value = conv::rows_to_chw(self.value(x), n, h, w)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::RowsToChw(x), rg))
    }

    /// Gathers rows of a 2-D tensor; rows may repeat.
    pub fn index_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("index_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Validation(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        if idx.is_empty() {
            return Err(Error::Validation("index_rows needs at least one index".into()));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::from_parts(vec![idx.len(), cols], data);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::IndexRows(x, idx), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Validation("concat_rows of nothing".into()))?;
        let (_, cols) = self.value(first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_parts(vec![rows, cols], data);
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean cross-entropy of row-wise logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let (rows, cols) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", &[rows, cols], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Validation(format!(
                "target {bad} out of range for {cols} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_mut(cols).zip(&targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[t];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / T::from_usize(rows).unwrap());
        let rg = self.any_grad(&[logits]);
        Ok(self.push(value, Op::CrossEntropy { logits, targets, probs }, rg))
    }

    /// Multi-head attention restricted to the key blocks listed in `plan`.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, plan: Arc<AttentionPlan>) -> Result<Var> {
        self.same_shape("block_attention", q, k)?;
        self.same_shape("block_attention", q, v)?;
        let (out, probs) = attention::plan_forward(self.value(q), self.value(k), self.value(v), heads, &plan)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            out,
            Op::BlockAttention {
                q,
                k,
                v,
                heads,
                plan,
                probs,
            },
            rg,
        ))
    }

    /// Horizontal forward difference `x[.., w+1] - x[.., w]`.
    pub fn diff_w(&mut self, x: Var) -> Result<Var> {
        let value = conv::diff(self.value(x), false)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::DiffW(x), rg))
    }

    /// Vertical forward difference `x[.., h+1, :] - x[.., h, :]`.
    pub fn diff_h(&mut self, x: Var) -> Result<Var> {
        let value = conv::diff(self.value(x), true)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::DiffH(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Gradients of the single-element `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], to: Var, g: Tensor<T>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.accumulate(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                if self.wants(*b) {
                    self.send(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.send(grads, *a, elementwise(g, self.value(*b), |g, y| g * y));
                }
                if self.wants(*b) {
                    self.send(grads, *b, elementwise(g, self.value(*a), |g, x| g * x));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.send(grads, *x, g.map(|v| v * s));
            }
            Op::AddRow(x, bias) => {
                self.send(grads, *x, g.clone());
                if self.wants(*bias) {
                    let cols = self.value(*bias).len();
                    let mut db = vec![T::zero(); cols];
                    for row in g.data().chunks(cols) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    self.send(grads, *bias, Tensor::from_parts(shape, db));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        Strided::row_major(0, n),
                        self.value(*b).data(),
                        Strided::transposed(0, n),
                        T::zero(),
                        &mut da,
                        Strided::row_major(0, k),
                    );
                    self.send(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        Strided::transposed(0, k),
                        g.data(),
                        Strided::row_major(0, n),
                        T::zero(),
                        &mut db,
                        Strided::row_major(0, n),
                    );
                    self.send(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Gelu(x) => {
                self.send(grads, *x, elementwise(g, self.value(*x), |g, x| g * gelu_grad(x)));
            }
            Op::Relu(x) => {
                self.send(
                    grads,
                    *x,
                    elementwise(g, self.value(*x), |g, x| if x > T::zero() { g } else { T::zero() }),
                );
            }
            Op::Sigmoid(x) => {
                self.send(grads, *x, elementwise(g, out, |g, y| g * y * (T::one() - y)));
            }
            Op::Abs(x) => {
                self.send(grads, *x, elementwise(g, self.value(*x), |g, x| g * sign(x)));
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                self.send(grads, *x, elementwise(g, self.value(*x), |g, x| g * two * x));
            }
            Op::SoftmaxRows(x) => {
                let cols = *out.shape().last().unwrap_or(&1);
                let mut dx = vec![T::zero(); out.len()];
                for ((dxr, yr), gr) in dx
                    .chunks_mut(cols)
                    .zip(out.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for ((d, &y), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (gv - dot);
                    }
                }
                self.send(grads, *x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let (rows, cols) = self.value(*x).dims2("layer_norm")?;
                let xv = self.value(*x).data();
                let gm = self.value(*gamma).data();
                let n = T::from_usize(cols).unwrap();
                let mut dx = vec![T::zero(); rows * cols];
                let mut dgamma = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                let mut xhat = vec![T::zero(); cols];
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let mean = row.iter().copied().sum::<T>() / n;
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for c in 0..cols {
                        xhat[c] = (row[c] - mean) * rstd[r];
                        let d = gr[c] * gm[c];
                        sum_d += d;
                        sum_dx += d * xhat[c];
                        dgamma[c] += gr[c] * xhat[c];
                        dbeta[c] += gr[c];
                    }
                    let (md, mdx) = (sum_d / n, sum_dx / n);
                    for c in 0..cols {
                        dx[r * cols + c] = rstd[r] * (gr[c] * gm[c] - md - xhat[c] * mdx);
                    }
                }
                self.send(grads, *x, Tensor::from_parts(vec![rows, cols], dx));
                let gs = self.shape(*gamma).to_vec();
                self.send(grads, *gamma, Tensor::from_parts(gs, dgamma));
                let bs = self.shape(*beta).to_vec();
                self.send(grads, *beta, Tensor::from_parts(bs, dbeta));
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.send(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::Mean(x) => {
                let s = g.data()[0] / T::from_usize(self.value(*x).len()).unwrap();
                self.send(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let need_x = self.wants(*x);
                let (dx, dw, db) = conv::backward(self.value(*x).shape(), self.value(*w), cols, g, *geom, need_x)?;
                if let Some(dx) = dx {
                    self.send(grads, *x, dx);
                }
                self.send(grads, *w, dw);
                if let Some(b) = b {
                    self.send(grads, *b, db);
                }
            }
            Op::Upsample2x(x) => {
                self.send(grads, *x, conv::upsample2x_backward(g, self.shape(*x)));
            }
            Op::ChwToRows(x) => {
                let s = self.shape(*x);
                let (n, h, w) = match s.len() {
                    3 => (1, s[1], s[2]),
                    _ => (s[0], s[2], s[3]),
                };
                let back = conv::rows_to_chw(g, n, h, w)?.reshape(s)?;
                self.send(grads, *x, back);
            }
            Op::RowsToChw(x) => {
                self.send(grads, *x, conv::chw_to_rows(g)?);
            }
            Op::StopGradient => {}
            Op::StraightThrough(x) => {
                self.send(grads, *x, g.clone());
            }
            Op::IndexRows(x, idx) => {
                let (rows, cols) = self.value(*x).dims2("index_rows")?;
                let mut dx = vec![T::zero(); rows * cols];
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dx[i * cols + c] += g.data()[k * cols + c];
                    }
                }
                self.send(grads, *x, Tensor::from_parts(vec![rows, cols], dx));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        let part = g.data()[offset..offset + n].to_vec();
                        self.send(grads, p, Tensor::from_parts(self.shape(p).to_vec(), part));
                    }
                    offset += n;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = self.shape(*logits)[1];
                let scale = g.data()[0] / T::from_usize(targets.len()).unwrap();
                let mut d = probs.clone();
                for (row, &t) in d.chunks_mut(cols).zip(targets) {
                    row[t] -= T::one();
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.send(grads, *logits, Tensor::from_parts(self.shape(*logits).to_vec(), d));
            }
            Op::BlockAttention {
                q,
                k,
                v,
                heads,
                plan,
                probs,
            } => {
                let (dq, dk, dv) =
                    attention::plan_backward(self.value(*q), self.value(*k), self.value(*v), g, *heads, plan, probs)?;
                self.send(grads, *q, dq);
                self.send(grads, *k, dk);
                self.send(grads, *v, dv);
            }
            Op::DiffW(x) => {
                self.send(grads, *x, conv::diff_backward(g, self.shape(*x), false));
            }
            Op::DiffH(x) => {
                self.send(grads, *x, conv::diff_backward(g, self.shape(*x), true));
            }
            Op::Reshape(x) => {
                let back = g.clone().reshape(self.shape(*x))?;
                self.send(grads, *x, back);
            }
        }
        Ok(())
    }
}

fn elementwise<T: Real>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_parts(g.shape().to_vec(), data)
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Numerically stable in-place softmax; `-inf` entries become exact zeros.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_value<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + tanh_exp(u))
}

/// `tanh` through a single `exp`; saturates cleanly at both ends.
fn tanh_exp<T: Real>(u: T) -> T {
    T::one() - T::lit(2.0) / ((u + u).exp() + T::one())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = tanh_exp(u);
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

pub(crate) fn sigmoid_value<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {:?}", other.map(|v| v.index())),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(
            &[2, 4],
            &[1.5, 1.5, 1.5, 1.5, 0.0, 3f64.ln(), f64::NEG_INFINITY, f64::NEG_INFINITY],
        ));
        let y = tape.softmax_rows(x);
        let v = tape.value(y).data();
        for &p in &v[..4] {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!((v[4] - 0.25).abs() < 1e-15);
        assert!((v[5] - 0.75).abs() < 1e-15);
        assert_eq!(v[6], 0.0);
        assert_eq!(v[7], 0.0);
    }

    #[test]
    fn stop_gradient_blocks_and_product_rule() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.5, -1.0, 2.0]));
        let s = tape.stop_gradient(x);
        assert_eq!(tape.value(s), tape.value(x));
        let sum_s = tape.sum(s);
        assert!(!tape.requires_grad(sum_s));

        let prod = tape.mul(x, s).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn backward_sums_reused_inputs() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let loss = tape.sum(z);
        let grads = tape.backward(loss).unwrap();
        // d/dx 2x^2 = 4x
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 8.0]);
    }

    #[test]
    fn layer_norm_normalises_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[3, 5], |i| (i * i) as f64 * 0.3 - 2.0));
        let g = tape.constant(Tensor::full(&[5], 1.0));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for r in 0..3 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
