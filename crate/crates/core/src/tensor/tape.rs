//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the indices
//! of its inputs. [`Tape::backward`] walks the nodes in reverse, so the tape
//! order is already a topological order.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::dense::gemm;
use super::{Csr, ParameterStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MulConst(Var, Arc<Tensor>),
    ScaleRows(Var, Arc<Vec<f64>>),
    Relu(Var),
    Elu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    LogEps(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Stack(Vec<Var>),
    Permute021(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    Diag(Var),
    SumAll(Var),
    SpMM(Arc<Csr>, Var),
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool1d {
        input: Var,
        argmax: Vec<usize>,
    },
    WeightedSum(Var, Var),
    L2NormalizeRows {
        input: Var,
        eps: f64,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    frozen_prefixes: Vec<String>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

impl Tape {
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

    /// Scalar value of a one-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.value(var).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not backed by a parameter store.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameters whose name starts with `prefix` are loaded as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen_prefixes.push(prefix.into());
    }

    /// Loads a named parameter; repeated loads return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let frozen = self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(value, Op::Leaf, !frozen);
        if !frozen {
            self.params.push((name.to_string(), v));
        }
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters loaded onto this tape, in load order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    // ----- forward operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a vector of length `d` to every length-`d` row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let b = self.value(bias);
        let d = b.len();
        let x = self.value(a);
        if b.shape().len() != 1 || x.shape().last() != Some(&d) {
            return Err(Error::shape(format!(
                "bias {:?} does not match {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let mut value = x.clone();
        for row in value.data_mut().chunks_mut(d) {
            for (v, bi) in row.iter_mut().zip(b.data()) {
                *v += bi;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Multiplies `a` by a one-element node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar expects a one-element factor"));
        }
        let factor = self.scalar(s);
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::MulScalar(a, s), rg))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, mask: Arc<Tensor>) -> Result<Var> {
        let value = self.value(a).zip_map(&mask, |x, m| x * m)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MulConst(a, mask), rg))
    }

    /// Scales leading-index slice `i` of `a` by `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Arc<Vec<f64>>) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != factors.len() {
            return Err(Error::shape("scale_rows factor count differs from rows"));
        }
        let mut value = x.clone();
        let w = value.row_len();
        for (row, f) in value.data_mut().chunks_mut(w).zip(factors.iter()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::ScaleRows(a, factors), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(relu);
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(elu);
        let rg = self.rg(a);
        self.push(value, Op::Elu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Clamps into `[lo, hi]`; the gradient passes wherever the input lies
    /// inside the closed interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    /// `ln(a + eps)`.
    pub fn log_eps(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).map(|x| (x + eps).ln());
        let rg = self.rg(a);
        self.push(value, Op::LogEps(a, eps), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let rows = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape("concat_cols row mismatch"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(src.row(r));
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if width == 0 || start + width > cols {
            return Err(Error::shape(format!(
                "column slice {start}..{} of {cols}",
                start + width
            )));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src.row(r)[start..start + width]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![rows, width], out),
            Op::SliceCols(a, start),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Stacks T matrices of shape N×d into an N×T×d tensor.
    pub fn stack(&mut self, steps: &[Var]) -> Result<Var> {
        let first = steps.first().ok_or_else(|| Error::shape("stack of nothing"))?;
        let (n, d) = self.value(*first).dims2()?;
        let t = steps.len();
        let mut out = vec![0.0; n * t * d];
        for (ti, &s) in steps.iter().enumerate() {
            let v = self.value(s);
            if v.shape() != [n, d] {
                return Err(Error::shape("stack operands differ in shape"));
            }
            for i in 0..n {
                out[(i * t + ti) * d..(i * t + ti + 1) * d].copy_from_slice(v.row(i));
            }
        }
        let rg = steps.iter().any(|&s| self.rg(s));
        Ok(self.push(
            Tensor::from_parts(vec![n, t, d], out),
            Op::Stack(steps.to_vec()),
            rg,
        ))
    }

    /// N×C×L to N×L×C.
    pub fn permute021(&mut self, a: Var) -> Result<Var> {
        let (n, c, l) = self.value(a).dims3()?;
        let value = permute021(self.value(a).data(), n, c, l);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![n, l, c], value),
            Op::Permute021(a),
            rg,
        ))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_last(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Log-sum-exp over the last axis; result has one entry per row.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let w = *x.shape().last().expect("tensor has a shape");
        let out: Vec<f64> = x.data().chunks(w).map(logsumexp).collect();
        let rg = self.rg(a);
        self.push(Tensor::vector(out), Op::LogSumExpRows(a), rg)
    }

    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if r != c {
            return Err(Error::shape("diag of a non-square matrix"));
        }
        let x = self.value(a);
        let out = (0..r).map(|i| x.data()[i * c + i]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(out), Op::Diag(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Constant sparse matrix times `a`.
    pub fn spmm(&mut self, s: Arc<Csr>, a: Var) -> Result<Var> {
        let value = s.matmul(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SpMM(s, a), rg))
    }

    /// Batched 1-D cross-correlation with zero padding.
    ///
    /// `input` is N×C_in×L, `kernel` is C_out×C_in×k, `bias` has C_out entries.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, l) = self.value(input).dims3()?;
        let (cout, kcin, k) = self.value(kernel).dims3()?;
        let geom = ConvGeometry::new(cin, l, k, stride, padding)?;
        if kcin != cin {
            return Err(Error::shape(format!(
                "kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape("conv bias length differs from output channels"));
        }
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let b = self.value(bias).data();
        let lout = geom.lout;
        let mut out = vec![0.0; n * cout * lout];
        out.par_chunks_mut(cout * lout)
            .enumerate()
            .for_each(|(i, dst)| {
                let mut col = vec![0.0; cin * k * lout];
                geom.im2col(&x[i * cin * l..(i + 1) * cin * l], &mut col);
                gemm(cout, cin * k, lout, w, false, &col, false, dst, false);
                for (o, row) in dst.chunks_mut(lout).enumerate() {
                    row.iter_mut().for_each(|v| *v += b[o]);
                }
            });
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(vec![n, cout, lout], out),
            Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Non-overlapping max pooling over the last axis of an N×C×L tensor;
    /// a trailing remainder shorter than `width` is dropped. Ties pick the
    /// earliest position.
    pub fn maxpool1d(&mut self, input: Var, width: usize) -> Result<Var> {
        let (n, c, l) = self.value(input).dims3()?;
        if width == 0 || l < width {
            return Err(Error::shape(format!("cannot pool length {l} by {width}")));
        }
        let lout = l / width;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * lout);
        let mut argmax = Vec::with_capacity(n * c * lout);
        for row in 0..n * c {
            let base = row * l;
            for t in 0..lout {
                let start = base + t * width;
                let mut best = start;
                for j in start + 1..start + width {
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, lout], out),
            Op::MaxPool1d { input, argmax },
            rg,
        ))
    }

    /// `out[i] = Σ_t weights[i, t] · states[i, t, :]` for N×T weights and
    /// N×T×d states.
    pub fn weighted_sum(&mut self, weights: Var, states: Var) -> Result<Var> {
        let (n, t) = self.value(weights).dims2()?;
        let (sn, st, d) = self.value(states).dims3()?;
        if (n, t) != (sn, st) {
            return Err(Error::shape("weighted_sum weight/state mismatch"));
        }
        let w = self.value(weights).data();
        let s = self.value(states).data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let dst = &mut out[i * d..(i + 1) * d];
            for ti in 0..t {
                let wt = w[i * t + ti];
                let src = &s[(i * t + ti) * d..(i * t + ti + 1) * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += wt * v;
                }
            }
        }
        let rg = self.rg(weights) || self.rg(states);
        Ok(self.push(
            Tensor::from_parts(vec![n, d], out),
            Op::WeightedSum(weights, states),
            rg,
        ))
    }

    /// Divides each row by `‖row‖ + eps`. With `eps == 0` a zero row is an
    /// error.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let x = self.value(a);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = x.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm + eps == 0.0 {
                return Err(Error::DegenerateEmbedding { row: i });
            }
            out.extend(row.iter().map(|v| v / (norm + eps)));
            norms.push(norm);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::L2NormalizeRows {
                input: a,
                eps,
                norms,
            },
            rg,
        ))
    }

    // ----- reverse pass -------------------------------------------------

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every loaded parameter into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParameterStore) -> Result<()> {
        for (name, var) in &self.params {
            if let Some(g) = grads.get(*var) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.rg(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let (p, q) = av.dims2()?;
                let r = bv.dims2()?.1;
                if self.rg(a) {
                    let mut da = vec![0.0; p * q];
                    gemm(p, r, q, g.data(), false, bv.data(), true, &mut da, false);
                    self.accumulate(grads, a, Tensor::from_parts(vec![p, q], da));
                }
                if self.rg(b) {
                    let mut db = vec![0.0; q * r];
                    gemm(q, p, r, av.data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, b, Tensor::from_parts(vec![q, r], db));
                }
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.transpose()?),
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y)?);
                }
                if self.rg(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y)?);
                }
            }
            &Op::AddBias(a, bias) => {
                self.accumulate(grads, a, g.clone());
                if self.rg(bias) {
                    let d = self.value(bias).len();
                    let mut db = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, bias, Tensor::vector(db));
                }
            }
            &Op::Scale(a, f) => self.accumulate(grads, a, g.map(|x| x * f)),
            &Op::MulScalar(a, s) => {
                let factor = self.scalar(s);
                if self.rg(a) {
                    self.accumulate(grads, a, g.map(|x| x * factor));
                }
                if self.rg(s) {
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    let shape = self.value(s).shape().to_vec();
                    self.accumulate(grads, s, Tensor::from_parts(shape, vec![ds]));
                }
            }
            Op::MulConst(a, mask) => self.accumulate(grads, *a, g.zip_map(mask, |x, m| x * m)?),
            Op::ScaleRows(a, factors) => {
                let mut da = g.clone();
                let w = da.row_len();
                for (row, f) in da.data_mut().chunks_mut(w).zip(factors.iter()) {
                    row.iter_mut().for_each(|v| *v *= f);
                }
                self.accumulate(grads, *a, da);
            }
            &Op::Relu(a) => {
                self.accumulate(grads, a, g.zip_map(out, |x, y| if y > 0.0 { x } else { 0.0 })?)
            }
            &Op::Elu(a) => {
                let x = self.value(a);
                let mut da = g.clone();
                for ((d, &xi), &yi) in da.data_mut().iter_mut().zip(x.data()).zip(out.data()) {
                    if xi <= 0.0 {
                        *d *= yi + 1.0;
                    }
                }
                self.accumulate(grads, a, da);
            }
            &Op::Tanh(a) => self.accumulate(grads, a, g.zip_map(out, |x, y| x * (1.0 - y * y))?),
            &Op::Sigmoid(a) => self.accumulate(grads, a, g.zip_map(out, |x, y| x * y * (1.0 - y))?),
            &Op::Clamp(a, lo, hi) => {
                let x = self.value(a);
                self.accumulate(
                    grads,
                    a,
                    g.zip_map(x, |d, xi| if xi >= lo && xi <= hi { d } else { 0.0 })?,
                );
            }
            &Op::LogEps(a, eps) => {
                self.accumulate(grads, a, g.zip_map(self.value(a), |d, x| d / (x + eps))?)
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(vec![rows, w], dp));
                    }
                    offset += w;
                }
            }
            &Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(a).dims2()?;
                let w = out.dims2()?.1;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    da[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, a, Tensor::from_parts(vec![rows, cols], da));
            }
            &Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                self.accumulate(grads, a, g.clone().reshape(&shape)?);
            }
            Op::Stack(steps) => {
                let (n, t, d) = out.dims3()?;
                for (ti, &s) in steps.iter().enumerate() {
                    if !self.rg(s) {
                        continue;
                    }
                    let mut ds = Vec::with_capacity(n * d);
                    for i in 0..n {
                        ds.extend_from_slice(&g.data()[(i * t + ti) * d..(i * t + ti + 1) * d]);
                    }
                    self.accumulate(grads, s, Tensor::from_parts(vec![n, d], ds));
                }
            }
            &Op::Permute021(a) => {
                let (n, l, c) = out.dims3()?;
                let da = permute021(g.data(), n, l, c);
                self.accumulate(grads, a, Tensor::from_parts(vec![n, c, l], da));
            }
            &Op::SoftmaxRows(a) => {
                let w = *out.shape().last().expect("shaped");
                let mut da = g.clone();
                for (drow, yrow) in da.data_mut().chunks_mut(w).zip(out.data().chunks(w)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                    for (d, &y) in drow.iter_mut().zip(yrow) {
                        *d = y * (*d - dot);
                    }
                }
                self.accumulate(grads, a, da);
            }
            &Op::LogSumExpRows(a) => {
                let x = self.value(a);
                let mut da = softmax_last(x);
                let w = *x.shape().last().expect("shaped");
                for (row, &gr) in da.data_mut().chunks_mut(w).zip(g.data()) {
                    row.iter_mut().for_each(|v| *v *= gr);
                }
                self.accumulate(grads, a, da);
            }
            &Op::Diag(a) => {
                let n = g.len();
                let mut da = vec![0.0; n * n];
                for i in 0..n {
                    da[i * n + i] = g.data()[i];
                }
                self.accumulate(grads, a, Tensor::from_parts(vec![n, n], da));
            }
            &Op::SumAll(a) => {
                let shape = self.value(a).shape().to_vec();
                self.accumulate(grads, a, Tensor::full(&shape, g.data()[0]));
            }
            Op::SpMM(s, a) => self.accumulate(grads, *a, s.matmul_transposed(g)?),
            &Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => self.conv1d_backward(g, input, kernel, bias, stride, padding, grads)?,
            Op::MaxPool1d { input, argmax } => {
                let mut da = vec![0.0; self.value(*input).len()];
                for (&src, &d) in argmax.iter().zip(g.data()) {
                    da[src] += d;
                }
                let shape = self.value(*input).shape().to_vec();
                self.accumulate(grads, *input, Tensor::from_parts(shape, da));
            }
            &Op::WeightedSum(weights, states) => {
                let (n, t) = self.value(weights).dims2()?;
                let d = out.dims2()?.1;
                let w = self.value(weights).data();
                let s = self.value(states).data();
                if self.rg(weights) {
                    let mut dw = vec![0.0; n * t];
                    for i in 0..n {
                        let gi = g.row(i);
                        for ti in 0..t {
                            let src = &s[(i * t + ti) * d..(i * t + ti + 1) * d];
                            dw[i * t + ti] = gi.iter().zip(src).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, weights, Tensor::from_parts(vec![n, t], dw));
                }
                if self.rg(states) {
                    let mut ds = vec![0.0; n * t * d];
                    for i in 0..n {
                        let gi = g.row(i);
                        for ti in 0..t {
                            let wt = w[i * t + ti];
                            for (o, &gv) in ds[(i * t + ti) * d..(i * t + ti + 1) * d].iter_mut().zip(gi) {
                                *o = wt * gv;
                            }
                        }
                    }
                    self.accumulate(grads, states, Tensor::from_parts(vec![n, t, d], ds));
                }
            }
            Op::L2NormalizeRows { input, eps, norms } => {
                let x = self.value(*input);
                let (r, c) = x.dims2()?;
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let xr = x.row(i);
                    let gr = g.row(i);
                    let n = norms[i];
                    let s = n + eps;
                    let dst = &mut da[i * c..(i + 1) * c];
                    if n == 0.0 {
                        for (o, &gv) in dst.iter_mut().zip(gr) {
                            *o = gv / s;
                        }
                        continue;
                    }
                    let gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                    let coef = gx / (n * s * s);
                    for ((o, &gv), &xv) in dst.iter_mut().zip(gr).zip(xr) {
                        *o = gv / s - xv * coef;
                    }
                }
                self.accumulate(grads, *input, Tensor::from_parts(vec![r, c], da));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv1d_backward(
        &self,
        g: &Tensor,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (n, cin, l) = self.value(input).dims3()?;
        let (cout, _, k) = self.value(kernel).dims3()?;
        let geom = ConvGeometry::new(cin, l, k, stride, padding)?;
        let lout = geom.lout;
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let need_input = self.rg(input);
        let need_kernel = self.rg(kernel);

        if self.rg(bias) {
            let mut db = vec![0.0; cout];
            for (i, row) in g.data().chunks(lout).enumerate() {
                db[i % cout] += row.iter().sum::<f64>();
            }
            self.accumulate(grads, bias, Tensor::vector(db));
        }
        if !need_input && !need_kernel {
            return Ok(());
        }
        // Per-sample partials; the kernel gradient is reduced afterwards in
        // sample order so the result does not depend on scheduling.
        let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let gi = &g.data()[i * cout * lout..(i + 1) * cout * lout];
                let mut col = vec![0.0; cin * k * lout];
                let mut dw = Vec::new();
                if need_kernel {
                    geom.im2col(&x[i * cin * l..(i + 1) * cin * l], &mut col);
                    dw = vec![0.0; cout * cin * k];
                    gemm(cout, lout, cin * k, gi, false, &col, true, &mut dw, false);
                }
                let mut dx = Vec::new();
                if need_input {
                    gemm(cin * k, cout, lout, w, true, gi, false, &mut col, false);
                    dx = vec![0.0; cin * l];
                    geom.col2im(&col, &mut dx);
                }
                (dx, dw)
            })
            .collect();
        if need_kernel {
            let mut dw = vec![0.0; cout * cin * k];
            for (_, part) in &partials {
                for (a, b) in dw.iter_mut().zip(part) {
                    *a += b;
                }
            }
            self.accumulate(grads, kernel, Tensor::from_parts(vec![cout, cin, k], dw));
        }
        if need_input {
            let mut dx = Vec::with_capacity(n * cin * l);
            for (part, _) in partials {
                dx.extend(part);
            }
            self.accumulate(grads, input, Tensor::from_parts(vec![n, cin, l], dx));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    cin: usize,
    l: usize,
    k: usize,
    stride: usize,
    padding: usize,
    lout: usize,
}

impl ConvGeometry {
    fn new(cin: usize, l: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        if k == 0 || stride == 0 || l + 2 * padding < k {
            return Err(Error::shape(format!(
                "invalid conv geometry: length {l}, kernel {k}, stride {stride}, padding {padding}"
            )));
        }
        let lout = (l + 2 * padding - k) / stride + 1;
        Ok(ConvGeometry {
            cin,
            l,
            k,
            stride,
            padding,
            lout,
        })
    }

    /// Source position for output `t` and tap `kk`, if inside the input.
    fn source(&self, t: usize, kk: usize) -> Option<usize> {
        (t * self.stride + kk)
            .checked_sub(self.padding)
            .filter(|&p| p < self.l)
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        for c in 0..self.cin {
            for kk in 0..self.k {
                let row = &mut col[(c * self.k + kk) * self.lout..(c * self.k + kk + 1) * self.lout];
                for (t, v) in row.iter_mut().enumerate() {
                    *v = self.source(t, kk).map_or(0.0, |p| x[c * self.l + p]);
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        for c in 0..self.cin {
            for kk in 0..self.k {
                let row = &col[(c * self.k + kk) * self.lout..(c * self.k + kk + 1) * self.lout];
                for (t, &v) in row.iter().enumerate() {
                    if let Some(p) = self.source(t, kk) {
                        dx[c * self.l + p] += v;
                    }
                }
            }
        }
    }
}

/// Output length of a 1-D convolution, or `None` for invalid geometry.
pub fn conv1d_output_len(l: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    ConvGeometry::new(1, l, k, stride, padding).ok().map(|g| g.lout)
}

fn permute021(x: &[f64], n: usize, c: usize, l: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c * l];
    for i in 0..n {
        for ci in 0..c {
            for li in 0..l {
                out[(i * l + li) * c + ci] = x[(i * c + ci) * l + li];
            }
        }
    }
    out
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// ELU with unit scale.
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax over the last axis of any tensor.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let w = *x.shape().last().expect("shaped");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}
