//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every op checks its output for NaN/Inf. Backward walks the tape in exact
//! reverse recording order, so gradients are bit-reproducible.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graphrep::MeanAggregator;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{})", self.rows, self.cols)
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "tensor data",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Single value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `c = op(a) * op(b) + beta * c` where `op` optionally transposes.
/// `a` is stored `m x k` (or `k x m` when transposed), `b` likewise.
#[allow(clippy::too_many_arguments)]
pub fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool, beta: f64, c: &mut Tensor) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    debug_assert_eq!(if tb { b.cols } else { b.rows }, k);
    debug_assert_eq!(c.shape(), (m, n));
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.data.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: strides describe the row-major buffers of the given shapes,
    // and every buffer is at least as long as its shape requires.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Concat(Var, Var),
    Scale(Var, f64),
    Sin(Var),
    Cos(Var),
    RowSelect(Var, Arc<Vec<usize>>),
    Aggregate(Var, Arc<MeanAggregator>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics of a train-mode batchnorm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running statistics.
    pub var_unbiased: Vec<f64>,
}

pub const BATCHNORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass; `None` for values that do not
    /// require gradients or did not influence the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(Error::Tape("cannot record on a tape consumed by backward".into()));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    fn shape_err(&self, context: &'static str, a: Var, b: Var) -> Error {
        Error::InvalidArgument(format!(
            "{context}: incompatible shapes {:?} and {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = Tensor::zeros(ta.rows, tb.cols);
        gemm(ta, false, tb, false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err("add", a, b));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let mut out = ta.clone();
        for (o, v) in out.data.iter_mut().zip(&tb.data) {
            *o *= v;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows != 1 || tr.cols != ta.cols {
            return Err(self.shape_err("add_row", a, row));
        }
        let mut out = ta.clone();
        for chunk in out.data.chunks_mut(ta.cols.max(1)) {
            for (o, b) in chunk.iter_mut().zip(&tr.data) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg, "add_row")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows != tb.rows {
            return Err(self.shape_err("concat_cols", a, b));
        }
        let cols = ta.cols + tb.cols;
        let mut data = Vec::with_capacity(ta.rows * cols);
        for r in 0..ta.rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor {
            rows: ta.rows,
            cols,
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Concat(a, b), rg, "concat_cols")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| s * v);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg, "scale")
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sin);
        let rg = self.rg(a);
        self.push(out, Op::Sin(a), rg, "sin")
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::cos);
        let rg = self.rg(a);
        self.push(out, Op::Cos(a), rg, "cos")
    }

    /// Gathers rows `indices` of `a` (repeats allowed).
    pub fn row_select(&mut self, a: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= ta.rows) {
            return Err(Error::InvalidArgument(format!(
                "row_select index {bad} out of range for {} rows",
                ta.rows
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * ta.cols);
        for &i in indices.iter() {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor {
            rows: indices.len(),
            cols: ta.cols,
            data,
        };
        let rg = self.rg(a);
        self.push(out, Op::RowSelect(a, indices), rg, "row_select")
    }

    /// Weighted neighbor mean, applied independently to each block of
    /// `num_nodes` rows (a batch of graphs sharing one topology).
    pub fn aggregate_mean(&mut self, a: Var, agg: Arc<MeanAggregator>) -> Result<Var> {
        let ta = self.value(a);
        let n = agg.num_nodes();
        if n == 0 || !ta.rows.is_multiple_of(n) {
            return Err(Error::DimensionMismatch {
                context: "aggregate_mean rows",
                expected: n,
                actual: ta.rows,
            });
        }
        let cols = ta.cols;
        let mut out = Tensor::zeros(ta.rows, cols);
        for block in 0..ta.rows / n {
            let base = block * n;
            for i in 0..n {
                let dst = &mut out.data[(base + i) * cols..(base + i + 1) * cols];
                for (j, w) in agg.row(i) {
                    let src = &ta.data[(base + j) * cols..(base + j + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Aggregate(a, agg), rg, "aggregate_mean")
    }

    /// Batch-statistics normalization per column with learnable `gamma`,
    /// `beta` (both `1 x cols`). Needs at least two rows.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let tx = self.value(x);
        let (m, c) = tx.shape();
        if m < 2 {
            return Err(Error::InvalidArgument(format!("batchnorm in train mode needs >= 2 rows, got {m}")));
        }
        let mut mean = vec![0.0; c];
        for r in 0..m {
            for (acc, v) in mean.iter_mut().zip(tx.row(r)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; c];
        for r in 0..m {
            for ((acc, v), mu) in var.iter_mut().zip(tx.row(r)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let var_unbiased = var.iter().map(|v| v / (m - 1) as f64).collect();
        var.iter_mut().for_each(|v| *v /= m as f64);
        let stats = BatchStats { mean, var_unbiased };
        let out = self.normalize(x, gamma, beta, &stats.mean, &var, true)?;
        Ok((out, stats))
    }

    /// Normalization with fixed (running) statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        self.normalize(x, gamma, beta, mean, var, false)
    }

    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], batch_stats: bool) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols;
        if tg.shape() != (1, c) || tb.shape() != (1, c) || mean.len() != c || var.len() != c {
            return Err(Error::InvalidArgument(format!(
                "batchnorm parameters must be 1x{c}, got {:?} and {:?}",
                tg.shape(),
                tb.shape()
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let mut xhat = tx.clone();
        for chunk in xhat.data.chunks_mut(c) {
            for (k, v) in chunk.iter_mut().enumerate() {
                *v = (*v - mean[k]) * inv_std[k];
            }
        }
        let mut out = xhat.clone();
        for chunk in out.data.chunks_mut(c) {
            for (k, v) in chunk.iter_mut().enumerate() {
                *v = *v * tg.data[k] + tb.data[k];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        };
        self.push(out, op, rg, "batchnorm")
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg, "sum")
    }

    /// Records an op whose forward value was computed by the caller.
    /// `backward` maps the upstream gradient (shaped like `value`) to one
    /// gradient per input, shaped like that input.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Result<Var> {
        let rg = inputs.iter().any(|&v| self.rg(v));
        let op = Op::Custom {
            inputs: inputs.to_vec(),
            backward: Box::new(backward),
        };
        self.push(value, op, rg, name)
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Populates gradients of `loss` (1x1) with respect to every recorded
    /// value that requires them. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Tape(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            let rg = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if rg(*a) {
                        let mut ga = Tensor::zeros(val(*a).rows, val(*a).cols);
                        gemm(&g, false, val(*b), true, 0.0, &mut ga);
                        Self::accumulate(&mut grads, *a, ga);
                    }
                    if rg(*b) {
                        let mut gb = Tensor::zeros(val(*b).rows, val(*b).cols);
                        gemm(val(*a), true, &g, false, 0.0, &mut gb);
                        Self::accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                    if rg(*b) {
                        Self::accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        let mut ga = g.clone();
                        for (o, v) in ga.data.iter_mut().zip(&val(*b).data) {
                            *o *= v;
                        }
                        Self::accumulate(&mut grads, *a, ga);
                    }
                    if rg(*b) {
                        let mut gb = g.clone();
                        for (o, v) in gb.data.iter_mut().zip(&val(*a).data) {
                            *o *= v;
                        }
                        Self::accumulate(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(a, row) => {
                    if rg(*row) {
                        let mut gr = Tensor::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (o, v) in gr.data.iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        Self::accumulate(&mut grads, *row, gr);
                    }
                    if rg(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                }
                Op::Concat(a, b) => {
                    let ca = val(*a).cols;
                    if rg(*a) {
                        let ga = Tensor::from_fn(g.rows, ca, |r, c| g.get(r, c));
                        Self::accumulate(&mut grads, *a, ga);
                    }
                    if rg(*b) {
                        let gb = Tensor::from_fn(g.rows, g.cols - ca, |r, c| g.get(r, ca + c));
                        Self::accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    Self::accumulate(&mut grads, *a, g.map(|v| s * v));
                }
                Op::Sin(a) => {
                    let mut ga = g.clone();
                    for (o, x) in ga.data.iter_mut().zip(&val(*a).data) {
                        *o *= x.cos();
                    }
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Cos(a) => {
                    let mut ga = g.clone();
                    for (o, x) in ga.data.iter_mut().zip(&val(*a).data) {
                        *o *= -x.sin();
                    }
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::RowSelect(a, indices) => {
                    let ta = val(*a);
                    let mut ga = Tensor::zeros(ta.rows, ta.cols);
                    for (k, &i) in indices.iter().enumerate() {
                        let dst = &mut ga.data[i * ta.cols..(i + 1) * ta.cols];
                        for (d, s) in dst.iter_mut().zip(g.row(k)) {
                            *d += s;
                        }
                    }
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::Aggregate(a, agg) => {
                    let n = agg.num_nodes();
                    let cols = g.cols;
                    let mut ga = Tensor::zeros(g.rows, cols);
                    for block in 0..g.rows / n {
                        let base = block * n;
                        for i in 0..n {
                            let up = &g.data[(base + i) * cols..(base + i + 1) * cols];
                            for (j, w) in agg.row(i) {
                                let dst = &mut ga.data[(base + j) * cols..(base + j + 1) * cols];
                                for (d, u) in dst.iter_mut().zip(up) {
                                    *d += w * u;
                                }
                            }
                        }
                    }
                    Self::accumulate(&mut grads, *a, ga);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (m, c) = g.shape();
                    let tg = val(*gamma);
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for r in 0..m {
                        for k in 0..c {
                            dgamma[k] += g.data[r * c + k] * xhat.data[r * c + k];
                            dbeta[k] += g.data[r * c + k];
                        }
                    }
                    if rg(*x) {
                        let mut gx = Tensor::zeros(m, c);
                        for k in 0..c {
                            let scale = tg.data[k] * inv_std[k];
                            if *batch_stats {
                                // d/dx of gamma * (x - mean) / std with batch mean and std
                                let (s1, s2) = (dbeta[k], dgamma[k]);
                                for r in 0..m {
                                    let i = r * c + k;
                                    gx.data[i] = scale * (g.data[i] - (s1 + xhat.data[i] * s2) / m as f64);
                                }
                            } else {
                                for r in 0..m {
                                    let i = r * c + k;
                                    gx.data[i] = scale * g.data[i];
                                }
                            }
                        }
                        Self::accumulate(&mut grads, *x, gx);
                    }
                    if rg(*gamma) {
                        Self::accumulate(&mut grads, *gamma, Tensor { rows: 1, cols: c, data: dgamma });
                    }
                    if rg(*beta) {
                        Self::accumulate(&mut grads, *beta, Tensor { rows: 1, cols: c, data: dbeta });
                    }
                }
                Op::Sum(a) => {
                    let ta = val(*a);
                    Self::accumulate(&mut grads, *a, Tensor::filled(ta.rows, ta.cols, g.item()));
                }
                Op::Custom { inputs, backward } => {
                    let gs = backward(&g);
                    if gs.len() != inputs.len() {
                        return Err(Error::Tape(format!(
                            "custom op returned {} gradients for {} inputs",
                            gs.len(),
                            inputs.len()
                        )));
                    }
                    for (&v, gv) in inputs.iter().zip(gs) {
                        if gv.shape() != val(v).shape() {
                            return Err(Error::Tape(format!(
                                "custom op gradient shape {:?} does not match input {:?}",
                                gv.shape(),
                                val(v).shape()
                            )));
                        }
                        if rg(v) {
                            Self::accumulate(&mut grads, v, gv);
                        }
                    }
                }
            }
            // keep gradients of leaves for the caller
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

/// Outcome of a finite-difference audit.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest over tensors of `max|analytic - fd| / max|fd|`.
    pub max_rel_err: f64,
    /// Tensor index where the largest error occurred.
    pub worst_tensor: usize,
    pub entries_checked: usize,
}

/// Compares `analytic` gradients of `f` at `params` with central differences
/// of step `h`. The error is measured per tensor relative to the largest
/// finite-difference magnitude in that tensor.
pub fn finite_difference_check(
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient check tensors",
            expected: params.len(),
            actual: analytic.len(),
        });
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_tensor: 0,
        entries_checked: 0,
    };
    for t in 0..work.len() {
        if analytic[t].shape() != work[t].shape() {
            return Err(Error::InvalidArgument(format!("gradient {t} has the wrong shape")));
        }
        let mut max_diff = 0.0f64;
        let mut max_fd = 0.0f64;
        for k in 0..work[t].len() {
            let orig = work[t].data[k];
            work[t].data[k] = orig + h;
            let up = f(&work)?;
            work[t].data[k] = orig - h;
            let down = f(&work)?;
            work[t].data[k] = orig;
            let fd = (up - down) / (2.0 * h);
            max_diff = max_diff.max((fd - analytic[t].data[k]).abs());
            max_fd = max_fd.max(fd.abs());
            report.entries_checked += 1;
        }
        let rel = if max_fd > 0.0 { max_diff / max_fd } else { max_diff };
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_tensor = t;
        }
    }
    Ok(report)
}
