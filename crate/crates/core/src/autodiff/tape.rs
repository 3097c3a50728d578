//! Wengert tape over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the ids of its
//! inputs. Node order is therefore a topological order, and [`Tape::backward`]
//! walks it once in reverse, summing gradient contributions at fan-out points.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    ScaledSoftmax(Var, f64),
    LogScaledSoftmax(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScaleRows(Var, Vec<f64>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Reshape(Var),
    GroupedL1 {
        a: Var,
        b: Var,
        groups: usize,
        inner: usize,
        kernels: usize,
    },
    L2Norm(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation plus the values of every intermediate.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the `requires_grad` leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn dim_err(op: &'static str, axis: usize, expected: usize, found: usize) -> Error {
    Error::Dimension {
        op,
        axis,
        expected,
        found,
    }
}

fn softmax_row(src: &[f64], beta: f64, dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (beta * (s - max)).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

/// Row-wise `softmax(beta · x)` over the trailing axis.
pub fn softmax_rows(x: &Tensor, beta: f64) -> Tensor {
    let c = x.cols();
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        softmax_row(src, beta, dst);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn expect_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Contract(format!(
                "{op} expects a matrix, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(dim_err(op, 0, sa.len(), sb.len()));
        }
        for (axis, (&x, &y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(dim_err(op, axis, x, y));
            }
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_2d("matmul", a)?;
        let (k2, n) = self.expect_2d("matmul", b)?;
        if k != k2 {
            return Err(dim_err("matmul", 0, k, k2));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Adds a `[J]` bias to every row of a `[B, J]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, j) = self.expect_2d("add_bias", x)?;
        let bs = self.shape(bias);
        if bs.len() != 1 || bs[0] != j {
            return Err(dim_err("add_bias", 1, j, bs.iter().product()));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(j) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias(x, bias), rg))
    }

    /// `input · weight + bias` for `input: [B, I]`, `weight: [I, J]`, `bias: [J]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let h = self.matmul(input, weight)?;
        self.add_bias(h, bias)
    }

    fn zip_op(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is passed only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Row-wise `softmax(beta · logits)`.
    pub fn scaled_softmax(&mut self, logits: Var, beta: f64) -> Result<Var> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Parameter(format!("softmax beta must be > 0, got {beta}")));
        }
        let value = softmax_rows(self.value(logits), beta);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::ScaledSoftmax(logits, beta), rg))
    }

    /// Row-wise `log softmax(beta · logits)`.
    pub fn log_scaled_softmax(&mut self, logits: Var, beta: f64) -> Result<Var> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Parameter(format!("softmax beta must be > 0, got {beta}")));
        }
        let x = self.value(logits);
        let c = x.cols();
        let mut out = vec![0.0; x.len()];
        for (src, dst) in x.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = src.iter().map(|&s| (beta * (s - max)).exp()).sum::<f64>().ln();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = beta * (s - max) - lse;
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::LogScaledSoftmax(logits, beta), rg))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (rows, _) = self.expect_2d("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.expect_2d("concat_cols", p)?;
            if r != rows {
                return Err(dim_err("concat_cols", 0, rows, r));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
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

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.expect_2d("slice_cols", x)?;
        if len == 0 || start + len > cols {
            return Err(dim_err("slice_cols", 1, cols, start + len));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, len], out),
            Op::SliceCols(x, start),
            rg,
        ))
    }

    /// Selects rows of a matrix by index (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.expect_2d("gather_rows", x)?;
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(dim_err("gather_rows", 0, rows, i + 1));
            }
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), cols], out),
            Op::GatherRows(x, indices.to_vec()),
            rg,
        ))
    }

    /// Multiplies row `i` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let (rows, cols) = self.expect_2d("scale_rows", x)?;
        if weights.len() != rows {
            return Err(dim_err("scale_rows", 0, rows, weights.len()));
        }
        let mut out = self.value(x).data().to_vec();
        for (row, &w) in out.chunks_mut(cols).zip(weights) {
            for v in row {
                *v *= w;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ScaleRows(x, weights.to_vec()),
            rg,
        ))
    }

    /// `out[b] = x[b, indices[b]]`, shaped `[B, 1]`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.expect_2d("pick", x)?;
        if indices.len() != rows {
            return Err(dim_err("pick", 0, rows, indices.len()));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows);
        for (r, &i) in indices.iter().enumerate() {
            if i >= cols {
                return Err(dim_err("pick", 1, cols, i + 1));
            }
            out.push(src.get(r, i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![rows, 1], out),
            Op::Pick(x, indices.to_vec()),
            rg,
        ))
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

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "reduction axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            for v in &mut out {
                *v /= len as f64;
            }
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        let op = if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        Ok(self.push(Tensor::from_parts(out_shape, out), op, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Grouped pairwise L1 distances between kernel projections.
    ///
    /// `a` is `[groups·p, inner·kernels]`, `b` is `[groups·q, inner·kernels]`, both laid
    /// out as `inner`-major blocks (`col = n·kernels + l`). The result has shape
    /// `[groups·p, q, kernels]` with
    /// `out[(g,i), j, l] = Σ_n |a[(g,i), n, l] − b[(g,j), n, l]|`.
    /// Rows from different groups are never compared.
    pub fn grouped_l1(
        &mut self,
        a: Var,
        b: Var,
        groups: usize,
        inner: usize,
        kernels: usize,
    ) -> Result<Var> {
        let (ra, ca) = self.expect_2d("grouped_l1", a)?;
        let (rb, cb) = self.expect_2d("grouped_l1", b)?;
        let width = inner * kernels;
        if ca != width {
            return Err(dim_err("grouped_l1", 1, width, ca));
        }
        if cb != width {
            return Err(dim_err("grouped_l1", 1, width, cb));
        }
        if groups == 0 || ra % groups != 0 {
            return Err(dim_err("grouped_l1", 0, groups, ra));
        }
        if rb % groups != 0 {
            return Err(dim_err("grouped_l1", 0, groups, rb));
        }
        let (p, q) = (ra / groups, rb / groups);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; ra * q * kernels];
        for g in 0..groups {
            for i in 0..p {
                let ar = &av[(g * p + i) * width..(g * p + i + 1) * width];
                for j in 0..q {
                    let br = &bv[(g * q + j) * width..(g * q + j + 1) * width];
                    let dst = &mut out[((g * p + i) * q + j) * kernels..][..kernels];
                    for n in 0..inner {
                        for (l, d) in dst.iter_mut().enumerate() {
                            *d += (ar[n * kernels + l] - br[n * kernels + l]).abs();
                        }
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(vec![ra, q, kernels], out),
            Op::GroupedL1 {
                a,
                b,
                groups,
                inner,
                kernels,
            },
            rg,
        ))
    }

    /// Euclidean norm of all entries, as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let rg = self.rg(x);
        self.push(Tensor::scalar(n), Op::L2Norm(x), rg)
    }

    /// Forward value `hard`, backward gradient routed unchanged into `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        let s = self.shape(soft);
        if s != hard.shape() {
            return Err(dim_err("straight_through", 0, s.iter().product(), hard.len()));
        }
        let rg = self.rg(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), rg))
    }

    /// Reverse pass from a scalar node.
    ///
    /// Only leaves created with [`Tape::param`] keep their gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, false);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*b) {
                    let j = g.cols();
                    let mut db = vec![0.0; j];
                    for row in g.data().chunks(j) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::vector(db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, zip(g, self.value(*b), |gv, bv| gv * bv));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, zip(g, self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| c * v));
            }
            Op::Offset(x) => self.accumulate(grads, *x, g.clone()),
            Op::Tanh(x) => self.accumulate(grads, *x, zip(g, y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, zip(g, y, |gv, yv| gv * yv * (1.0 - yv)))
            }
            Op::Exp(x) => self.accumulate(grads, *x, zip(g, y, |gv, yv| gv * yv)),
            Op::Log(x) => self.accumulate(grads, *x, zip(g, self.value(*x), |gv, xv| gv / xv)),
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.accumulate(
                    grads,
                    *x,
                    zip(g, self.value(*x), |gv, xv| {
                        if xv >= lo && xv <= hi {
                            gv
                        } else {
                            0.0
                        }
                    }),
                )
            }
            Op::ScaledSoftmax(x, beta) => {
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.data().chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = beta * yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::LogScaledSoftmax(x, beta) => {
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.data().chunks(c)).zip(dx.chunks_mut(c)) {
                    let gsum: f64 = gr.iter().sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = beta * (gv - yv.exp() * gsum);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::ConcatCols(parts) => {
                let rows = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
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
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.rows(), xv.cols());
                let len = y.cols();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![rows, cols], dx));
            }
            Op::GatherRows(x, indices) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for (d, v) in dx[i * cols..(i + 1) * cols].iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::ScaleRows(x, weights) => {
                let cols = g.cols();
                let mut dx = g.data().to_vec();
                for (row, &w) in dx.chunks_mut(cols).zip(weights) {
                    for v in row {
                        *v *= w;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Pick(x, indices) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (r, &i) in indices.iter().enumerate() {
                    dx[r * cols + i] += g.data()[r];
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let v = g.item() / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), v));
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for i in 0..inner {
                            dx[base + i] = g.data()[o * inner + i] * scale;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, dx));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::GroupedL1 {
                a,
                b,
                groups,
                inner,
                kernels,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let width = inner * kernels;
                let p = av.rows() / groups;
                let q = bv.rows() / groups;
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for gi in 0..*groups {
                    for i in 0..p {
                        let ai = (gi * p + i) * width;
                        for j in 0..q {
                            let bj = (gi * q + j) * width;
                            let up = &g.data()[((gi * p + i) * q + j) * kernels..][..*kernels];
                            for n in 0..*inner {
                                for (l, &u) in up.iter().enumerate() {
                                    let c = n * kernels + l;
                                    let s = sign(av.data()[ai + c] - bv.data()[bj + c]) * u;
                                    da[ai + c] += s;
                                    db[bj + c] -= s;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
            }
            Op::L2Norm(x) => {
                let norm = y.item();
                let xv = self.value(*x);
                let dx = if norm > 0.0 {
                    let k = g.item() / norm;
                    xv.map(|v| v * k)
                } else {
                    Tensor::zeros(xv.shape())
                };
                self.accumulate(grads, *x, dx);
            }
            Op::StraightThrough(soft) => self.accumulate(grads, *soft, g.clone()),
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `sign(0) = 0`, fixed so the L1 subgradient is deterministic.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}
