//! Wengert-list reverse-mode differentiation over dense matrices.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and a backward pass is a single reverse sweep from the
//! root. Leaf gradients accumulate across backward calls; interior
//! gradients live only for the duration of one call.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Lower clamp applied inside [`Tape::reciprocal`].
pub const RECIPROCAL_EPS: f64 = 1e-6;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Model weight. Excluded from the activation float count.
    Parameter,
    Input,
    Constant,
}

#[derive(Debug)]
enum Op {
    Leaf(LeafKind),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    ScalarMul(Var, f64),
    Transpose(Var),
    RowSum(Var),
    ColSum(Var),
    EluPlusOne(Var),
    Relu(Var),
    Power(Var, f64),
    Reciprocal(Var, f64),
    BroadcastCol(Var),
    BroadcastRow(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Matrix, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Matrix },
    Mse(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    DecayMul(Var, f64),
}

impl Op {
    fn cache_floats(&self) -> usize {
        match self {
            Op::LayerNorm { normalized, inv_std, .. } => normalized.len() + inv_std.len(),
            Op::CrossEntropy { probs, .. } => probs.len(),
            _ => 0,
        }
    }

    fn clear_cache(&mut self) {
        match self {
            Op::LayerNorm { normalized, inv_std, .. } => {
                *normalized = Matrix::zeros(0, 0);
                inv_std.clear();
            }
            Op::CrossEntropy { probs, .. } => *probs = Matrix::zeros(0, 0),
            _ => {}
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    grad: Option<Matrix>,
}

impl Node {
    fn is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf(_))
    }

    fn is_parameter(&self) -> bool {
        matches!(self.op, Op::Leaf(LeafKind::Parameter))
    }
}

/// One differentiable region.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    live_floats: usize,
    peak_floats: usize,
    param_floats: usize,
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

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Floats currently held by non-parameter nodes (activations, inputs,
    /// constants and op caches).
    pub fn live_floats(&self) -> usize {
        self.live_floats
    }

    /// High-water mark of [`Tape::live_floats`].
    pub fn peak_floats(&self) -> usize {
        self.peak_floats
    }

    pub fn param_floats(&self) -> usize {
        self.param_floats
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Accumulated leaf gradient, or zeros when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Matrix {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shape(v);
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let floats = value.len() + op.cache_floats();
        let node = Node { value, op, requires_grad, grad: None };
        if node.is_parameter() {
            self.param_floats += floats;
        } else {
            self.live_floats += floats;
            self.peak_floats = self.peak_floats.max(self.live_floats);
        }
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Matrix, kind: LeafKind, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf(kind), requires_grad)
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, LeafKind::Parameter, true)
    }

    /// A parameter that does not need gradients (evaluation passes).
    pub fn frozen_param(&mut self, value: Matrix) -> Var {
        self.leaf(value, LeafKind::Parameter, false)
    }

    pub fn input(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.leaf(value, LeafKind::Input, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, LeafKind::Constant, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape { op, left: sa, right: sb });
        }
        Ok(())
    }

    // ---- primitives -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::ScalarMul(a, s), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    /// `rows × 1` sums across each row.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).row_sums();
        let rg = self.rg(&[a]);
        self.push(value, Op::RowSum(a), rg)
    }

    /// `1 × cols` sums down each column.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).col_sums();
        let rg = self.rg(&[a]);
        self.push(value, Op::ColSum(a), rg)
    }

    /// `elu(x) + 1`, strictly positive on finite input.
    pub fn elu_plus_one(&mut self, a: Var) -> Var {
        let value = self.value(a).map(elu_plus_one);
        let rg = self.rg(&[a]);
        self.push(value, Op::EluPlusOne(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Elementwise `x^alpha` for strictly positive `x`.
    pub fn power(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain { op: "power", detail: format!("base {bad} is not positive") });
        }
        let value = x.map(|v| v.powf(alpha));
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Power(a, alpha), rg))
    }

    /// Elementwise `1 / max(x, eps)`. Non-positive input is a domain error.
    pub fn reciprocal(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain { op: "reciprocal", detail: format!("input {bad} is not positive") });
        }
        let value = x.map(|v| 1.0 / v.max(eps));
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reciprocal(a, eps), rg))
    }

    /// Repeat an `N × 1` column across `cols` columns.
    pub fn broadcast_col(&mut self, a: Var, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if x.cols() != 1 {
            return Err(Error::Shape { op: "broadcast_col", left: x.shape(), right: (x.rows(), 1) });
        }
        let value = Matrix::from_fn(x.rows(), cols, |r, _| x.get(r, 0));
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::BroadcastCol(a), rg))
    }

    /// Repeat a `1 × C` row across `rows` rows.
    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(Error::Shape { op: "broadcast_row", left: x.shape(), right: (1, x.cols()) });
        }
        let value = Matrix::from_fn(rows, x.cols(), |_, c| x.get(0, c));
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::BroadcastRow(a), rg))
    }

    /// Row-wise layer normalization with a `1 × d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = xv.shape();
        for p in [gain, bias] {
            if self.shape(p) != (1, d) {
                return Err(Error::Shape { op: "layer_norm", left: (rows, d), right: self.shape(p) });
            }
        }
        let mut normalized = Matrix::zeros(rows, d);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in normalized.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let value = Matrix::from_fn(rows, d, |r, c| normalized.get(r, c) * g.get(0, c) + b.get(0, c));
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, normalized, inv_std }, rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Mean negative log-likelihood over rows; returns a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if labels.len() != x.rows() {
            return Err(Error::Shape { op: "cross_entropy", left: x.shape(), right: (labels.len(), 1) });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= x.cols()) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {} classes", x.cols())));
        }
        let mut probs = x.clone();
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = probs.row_mut(r);
            softmax_in_place(row);
            loss -= row[label].max(f64::MIN_POSITIVE).ln();
        }
        let n = labels.len().max(1) as f64;
        let value = Matrix::filled(1, 1, loss / n);
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Mean squared error; returns a `1 × 1` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let n = x.len().max(1) as f64;
        let loss = x.data().iter().zip(y.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Matrix::filled(1, 1, loss), Op::Mse(a, b), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_rows(&mats)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_cols(start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::InvalidArgument(format!("row id {bad} out of range for {} rows", t.rows())));
        }
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// `D · a` where `D[i][j] = exp(-|i - j| · scale)`, evaluated without
    /// materializing `D`.
    pub fn decay_mul(&mut self, a: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(Error::InvalidArgument(format!("decay scale must be positive, got {scale}")));
        }
        let value = decay_apply(self.value(a), scale);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::DecayMul(a, scale), rg))
    }

    // ---- backward -------------------------------------------------------

    /// Propagate `seed` (same shape as `root`) back to every reachable leaf,
    /// adding into the leaves' gradient accumulators.
    ///
    /// Without `retain` the interior values are released afterwards and any
    /// further backward call fails with [`Error::TapeConsumed`].
    pub fn backward(&mut self, root: Var, seed: &Matrix, retain: bool) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root_shape = self.shape(root);
        if seed.shape() != root_shape {
            return Err(Error::Shape { op: "backward seed", left: root_shape, right: seed.shape() });
        }
        if self.nodes[root.0].requires_grad {
            let mut grads: Vec<Option<Matrix>> = Vec::new();
            grads.resize_with(root.0 + 1, || None);
            grads[root.0] = Some(seed.clone());
            for i in (0..=root.0).rev() {
                let Some(g) = grads[i].take() else { continue };
                if self.nodes[i].is_leaf() {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(acc) => acc.add_assign(&g)?,
                        None => node.grad = Some(g),
                    }
                    continue;
                }
                self.propagate(i, &g, &mut grads)?;
            }
        }
        if !retain {
            self.release();
        }
        Ok(())
    }

    fn release(&mut self) {
        self.consumed = true;
        for node in &mut self.nodes {
            if node.is_leaf() {
                continue;
            }
            self.live_floats -= node.value.len() + node.op.cache_floats();
            node.value = Matrix::zeros(0, 0);
            node.op.clear_cache();
        }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf(_) => unreachable!("leaves are handled by the caller"),
            Op::MatMul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.matmul_t(val(*b))?)?;
                }
                if wants(*b) {
                    self.accumulate(grads, *b, val(*a).t_matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Hadamard(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.hadamard(val(*b))?)?;
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g.hadamard(val(*a))?)?;
                }
            }
            Op::ScalarMul(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::RowSum(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)))?;
            }
            Op::ColSum(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Matrix::from_fn(r, c, |_, j| g.get(0, j)))?;
            }
            Op::EluPlusOne(a) => {
                let dx = val(*a).zip_map(out, |x, y| if x >= 0.0 { 1.0 } else { y })?;
                self.accumulate(grads, *a, g.hadamard(&dx)?)?;
            }
            Op::Relu(a) => {
                let dx = val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g.hadamard(&dx)?)?;
            }
            Op::Power(a, alpha) => {
                let dx = val(*a).zip_map(out, |x, y| alpha * y / x)?;
                self.accumulate(grads, *a, g.hadamard(&dx)?)?;
            }
            Op::Reciprocal(a, eps) => {
                let dx = val(*a).zip_map(out, |x, y| if x >= *eps { -y * y } else { 0.0 })?;
                self.accumulate(grads, *a, g.hadamard(&dx)?)?;
            }
            Op::BroadcastCol(a) => self.accumulate(grads, *a, g.row_sums())?,
            Op::BroadcastRow(a) => self.accumulate(grads, *a, g.col_sums())?,
            Op::LayerNorm { x, gain, bias, normalized, inv_std } => {
                let gv = val(*gain);
                let d = normalized.cols();
                if wants(*gain) {
                    self.accumulate(grads, *gain, g.hadamard(normalized)?.col_sums())?;
                }
                if wants(*bias) {
                    self.accumulate(grads, *bias, g.col_sums())?;
                }
                if wants(*x) {
                    let mut dx = Matrix::zeros(normalized.rows(), d);
                    for r in 0..normalized.rows() {
                        let n_row = normalized.row(r);
                        let g_row = g.row(r);
                        let gn: Vec<f64> = (0..d).map(|c| g_row[c] * gv.get(0, c)).collect();
                        let sum_gn: f64 = gn.iter().sum();
                        let sum_gn_n: f64 = gn.iter().zip(n_row).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / d as f64;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = k * (d as f64 * gn[c] - sum_gn - n_row[c] * sum_gn_n);
                        }
                    }
                    self.accumulate(grads, *x, dx)?;
                }
            }
            Op::SoftmaxRows(a) => {
                let mut dx = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = y[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, dx)?;
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g.get(0, 0) / labels.len().max(1) as f64;
                let mut dx = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    let v = dx.get(r, l);
                    dx.set(r, l, v - 1.0);
                }
                self.accumulate(grads, *logits, dx.scale(scale))?;
            }
            Op::Mse(a, b) => {
                let n = val(*a).len().max(1) as f64;
                let k = 2.0 * g.get(0, 0) / n;
                let diff = val(*a).sub(val(*b))?;
                if wants(*a) {
                    self.accumulate(grads, *a, diff.scale(k))?;
                }
                if wants(*b) {
                    self.accumulate(grads, *b, diff.scale(-k))?;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = val(*p).rows();
                    if wants(*p) {
                        self.accumulate(grads, *p, g.slice_rows(start, rows)?)?;
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = val(*p).cols();
                    if wants(*p) {
                        self.accumulate(grads, *p, g.slice_cols(start, cols)?)?;
                    }
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut dx = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    dx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, dx)?;
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut dx = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    dx.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, dx)?;
            }
            Op::GatherRows(table, ids) => {
                let (r, c) = val(*table).shape();
                let mut dx = Matrix::zeros(r, c);
                for (i, &id) in ids.iter().enumerate() {
                    for (o, v) in dx.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, dx)?;
            }
            // D is symmetric, so the adjoint is the same operator.
            Op::DecayMul(a, scale) => self.accumulate(grads, *a, decay_apply(g, *scale))?,
        }
        Ok(())
    }
}

#[inline]
pub fn elu_plus_one(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Two first-order recursive passes: the kernel `exp(-|i-j|·s)` is the sum
/// of a causal and an anti-causal geometric filter sharing the diagonal.
pub fn decay_apply(a: &Matrix, scale: f64) -> Matrix {
    let (n, c) = a.shape();
    let q = (-scale).exp();
    let mut fwd = a.clone();
    for i in 1..n {
        for j in 0..c {
            let prev = fwd.get(i - 1, j);
            let v = fwd.get(i, j) + q * prev;
            fwd.set(i, j, v);
        }
    }
    let mut bwd = a.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        for j in 0..c {
            let next = bwd.get(i + 1, j);
            let v = bwd.get(i, j) + q * next;
            bwd.set(i, j, v);
        }
    }
    Matrix::from_fn(n, c, |i, j| fwd.get(i, j) + bwd.get(i, j) - a.get(i, j))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scalar_gradient() {
        let mut t = Tape::new();
        let x = t.input(Matrix::filled(1, 1, 2.0), true);
        let y = t.scalar_mul(x, 3.0);
        t.backward(y, &Matrix::ones(1, 1), false).unwrap();
        assert_eq!(t.grad(x).unwrap().get(0, 0), 3.0);
    }

    #[test]
    fn second_backward_without_retain_is_rejected() {
        let mut t = Tape::new();
        let x = t.input(Matrix::filled(1, 1, 2.0), true);
        let y = t.scalar_mul(x, 3.0);
        t.backward(y, &Matrix::ones(1, 1), false).unwrap();
        assert!(matches!(t.backward(y, &Matrix::ones(1, 1), false), Err(Error::TapeConsumed)));
    }

    #[test]
    fn retained_backward_accumulates() {
        let mut t = Tape::new();
        let x = t.input(Matrix::filled(1, 1, 2.0), true);
        let y = t.scalar_mul(x, 3.0);
        t.backward(y, &Matrix::ones(1, 1), true).unwrap();
        t.backward(y, &Matrix::filled(1, 1, 2.0), false).unwrap();
        assert_eq!(t.grad(x).unwrap().get(0, 0), 9.0);
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut t = Tape::new();
        let x = t.input(Matrix::ones(2, 2), true);
        let y = t.scalar_mul(x, 1.0);
        assert!(matches!(t.backward(y, &Matrix::ones(1, 2), true), Err(Error::Shape { .. })));
    }

    #[test]
    fn elu_plus_one_at_zero() {
        let mut t = Tape::new();
        let x = t.input(Matrix::zeros(1, 1), true);
        let y = t.elu_plus_one(x);
        assert_eq!(t.value(y).get(0, 0), 1.0);
        t.backward(y, &Matrix::ones(1, 1), false).unwrap();
        assert_eq!(t.grad(x).unwrap().get(0, 0), 1.0);
    }

    #[test]
    fn power_rule_at_sixteen() {
        let mut t = Tape::new();
        let x = t.input(Matrix::filled(1, 1, 16.0), true);
        let y = t.power(x, 0.25).unwrap();
        assert!((t.value(y).get(0, 0) - 2.0).abs() < 1e-15);
        t.backward(y, &Matrix::ones(1, 1), false).unwrap();
        assert!((t.grad(x).unwrap().get(0, 0) - 1.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn power_and_reciprocal_reject_non_positive() {
        let mut t = Tape::new();
        let x = t.input(Matrix::row_vector(&[1.0, 0.0]), true);
        assert!(matches!(t.power(x, 0.5), Err(Error::Domain { .. })));
        assert!(matches!(t.reciprocal(x, RECIPROCAL_EPS), Err(Error::Domain { .. })));
    }

    #[test]
    fn reciprocal_clamps_small_positive_values() {
        let mut t = Tape::new();
        let x = t.input(Matrix::row_vector(&[1e-9, 2.0]), true);
        let y = t.reciprocal(x, RECIPROCAL_EPS).unwrap();
        assert_eq!(t.value(y).data(), &[1e6, 0.5]);
        t.backward(y, &Matrix::ones(1, 2), false).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, -0.25]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::new();
        let z = t.input(Matrix::zeros(1, 2), true);
        let l = t.cross_entropy(z, &[0]).unwrap();
        assert!((t.value(l).get(0, 0) - 2f64.ln()).abs() < 1e-15);
        t.backward(l, &Matrix::ones(1, 1), false).unwrap();
        assert_eq!(t.grad(z).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn decay_apply_matches_dense_kernel() {
        let a = Matrix::from_fn(7, 3, |r, c| ((r * 3 + c) as f64).sin());
        let scale = 0.7;
        let dense = Matrix::from_fn(7, 7, |i, j| (-(i as f64 - j as f64).abs() * scale).exp());
        let expect = dense.matmul(&a).unwrap();
        assert!(decay_apply(&a, scale).max_abs_diff(&expect) < 1e-13);
    }

    #[test]
    fn release_drops_activation_floats() {
        let mut t = Tape::new();
        let w = t.param(Matrix::ones(4, 4));
        let x = t.input(Matrix::ones(2, 4), false);
        let y = t.matmul(x, w).unwrap();
        let s = t.row_sum(y);
        assert_eq!(t.param_floats(), 16);
        assert_eq!(t.live_floats(), 8 + 8 + 2);
        t.backward(s, &Matrix::ones(2, 1), false).unwrap();
        assert_eq!(t.live_floats(), 8);
        assert_eq!(t.peak_floats(), 18);
    }
}
