//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its operands. Operand ids always point at earlier nodes, so a single
//! reverse sweep over the node list is a valid topological traversal.
//!
//! ```
//! use sista_core::autodiff::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::scalar(3.0));
//! let y = tape.hadamard(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().as_scalar(), Some(6.0));
//! ```

use super::matrix::{log_softmax_in_place, softmax_in_place, Matrix};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    /// `n x m` plus a `1 x m` row broadcast over every row.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Transpose(NodeId),
    /// Each row divided by its L2 norm.
    NormalizeRows(NodeId),
    /// Each row divided by its sum.
    SumNormalizeRows(NodeId),
    SoftmaxRows(NodeId, f64),
    LogSoftmaxRows(NodeId, f64),
    MinMaxRows {
        input: NodeId,
        /// Per row: `Some((argmin, argmax))`, or `None` when the row was degenerate.
        extrema: Vec<Option<(usize, usize)>>,
    },
    SliceRows(NodeId, usize),
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the output with respect to `id`. `None` for constants and
    /// for nodes the output does not depend on.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.adjoints.get_mut(id.0).and_then(Option::take)
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

    /// A tracked input: gradients are reported for it.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// An untracked input.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.value(id)
            .as_scalar()
            .ok_or_else(|| Error::Usage(format!("node {} is not a scalar", id.0)))
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn record(&mut self, value: Matrix, op: Op, operands: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {op:?}"
            )));
        }
        let rg = self.tracked(operands);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.record(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        self.record(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        self.record(v, Op::Sub(a, b), &[a, b])
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        self.record(v, Op::Hadamard(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != m.cols() {
            return Err(Error::shape(format!(
                "cannot broadcast {}x{} over {}x{}",
                r.rows(),
                r.cols(),
                m.rows(),
                m.cols()
            )));
        }
        let mut v = m.clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(r.data()) {
                *x += b;
            }
        }
        self.record(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).scale(factor);
        self.record(v, Op::Scale(a, factor), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.record(v, Op::Tanh(a), &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose();
        self.record(v, Op::Transpose(a), &[a])
    }

    /// Rows scaled to unit L2 norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0) {
                return Err(Error::Degenerate(format!("row {r} has zero norm")));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        self.record(v, Op::NormalizeRows(a), &[a])
    }

    /// Rows divided by their sums. Rows must have a positive sum.
    pub fn sum_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return Err(Error::Degenerate(format!("row {r} sums to {s}")));
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        self.record(v, Op::SumNormalizeRows(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId, temperature: f64) -> Result<NodeId> {
        check_temperature(temperature)?;
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r), temperature);
        }
        self.record(v, Op::SoftmaxRows(a, temperature), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: NodeId, temperature: f64) -> Result<NodeId> {
        check_temperature(temperature)?;
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            log_softmax_in_place(v.row_mut(r), temperature);
        }
        self.record(v, Op::LogSoftmaxRows(a, temperature), &[a])
    }

    /// Per-row min-max rescaling to `[0, 1]`. Rows whose range is below
    /// `eps` map to all ones and pass no gradient.
    pub fn minmax_rows(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        let mut extrema = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let (lo, hi) = argmin_argmax(row);
            let range = row[hi] - row[lo];
            if range < eps {
                row.iter_mut().for_each(|x| *x = 1.0);
                extrema.push(None);
            } else {
                let min = row[lo];
                row.iter_mut().for_each(|x| *x = (*x - min) / range);
                extrema.push(Some((lo, hi)));
            }
        }
        self.record(v, Op::MinMaxRows { input: a, extrema }, &[a])
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a).slice_rows(start, len)?;
        self.record(v, Op::SliceRows(a, start), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Matrix::scalar(self.value(a).sum());
        self.record(v, Op::Sum(a), &[a])
    }

    /// Sum of several equally shaped nodes, folded left to right.
    pub fn add_all(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = ids
            .split_first()
            .ok_or_else(|| Error::Usage("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &id| self.add(acc, id))
    }

    /// Gradients of the scalar `output` with respect to every tracked node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got {}x{}",
                out.rows(),
                out.cols()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj)?;
            adj[idx] = Some(g);
        }

        // Only tracked nodes keep adjoints.
        for (i, a) in adj.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *a = None;
            }
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, node: &Node, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(adj, *a, g.matmul(&val(*b).transpose())?)?;
                }
                if self.wants(*b) {
                    accumulate(adj, *b, val(*a).transpose().matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                accumulate_if(self, adj, *a, || Ok(g.clone()))?;
                accumulate_if(self, adj, *b, || Ok(g.clone()))?;
            }
            Op::Sub(a, b) => {
                accumulate_if(self, adj, *a, || Ok(g.clone()))?;
                accumulate_if(self, adj, *b, || Ok(g.scale(-1.0)))?;
            }
            Op::Hadamard(a, b) => {
                accumulate_if(self, adj, *a, || g.hadamard(val(*b)))?;
                accumulate_if(self, adj, *b, || g.hadamard(val(*a)))?;
            }
            Op::AddRow(a, row) => {
                accumulate_if(self, adj, *a, || Ok(g.clone()))?;
                accumulate_if(self, adj, *row, || {
                    let mut s = Matrix::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (acc, x) in s.data_mut().iter_mut().zip(r) {
                            *acc += x;
                        }
                    }
                    Ok(s)
                })?;
            }
            Op::Scale(a, f) => accumulate_if(self, adj, *a, || Ok(g.scale(*f)))?,
            Op::Tanh(a) => {
                accumulate_if(self, adj, *a, || g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y)))?
            }
            Op::Transpose(a) => accumulate_if(self, adj, *a, || Ok(g.transpose()))?,
            Op::NormalizeRows(a) => accumulate_if(self, adj, *a, || {
                // d(x/|x|) = (g - y (y.g)) / |x|
                let x = val(*a);
                let y = &node.value;
                let mut out = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yg: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in out.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = (gi - yi * yg) / n;
                    }
                }
                Ok(out)
            })?,
            Op::SumNormalizeRows(a) => accumulate_if(self, adj, *a, || {
                let x = val(*a);
                let y = &node.value;
                let mut out = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let s: f64 = x.row(r).iter().sum();
                    let gy: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for (o, gi) in out.row_mut(r).iter_mut().zip(g.row(r)) {
                        *o = (gi - gy) / s;
                    }
                }
                Ok(out)
            })?,
            Op::SoftmaxRows(a, t) => accumulate_if(self, adj, *a, || {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gy: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in out.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yi * (gi - gy) / t;
                    }
                }
                Ok(out)
            })?,
            Op::LogSoftmaxRows(a, t) => accumulate_if(self, adj, *a, || {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gs: f64 = g.row(r).iter().sum();
                    for ((o, gi), yi) in out.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = (gi - yi.exp() * gs) / t;
                    }
                }
                Ok(out)
            })?,
            Op::MinMaxRows { input, extrema } => accumulate_if(self, adj, *input, || {
                let x = val(*input);
                let y = &node.value;
                let mut out = Matrix::zeros(x.rows(), x.cols());
                for (r, ext) in extrema.iter().enumerate() {
                    let Some((lo, hi)) = *ext else { continue };
                    let range = x.get(r, hi) - x.get(r, lo);
                    let g_sum: f64 = g.row(r).iter().sum();
                    let gy: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                    let row = out.row_mut(r);
                    for (o, gi) in row.iter_mut().zip(g.row(r)) {
                        *o = gi / range;
                    }
                    row[lo] += (gy - g_sum) / range;
                    row[hi] -= gy / range;
                }
                Ok(out)
            })?,
            Op::SliceRows(a, start) => accumulate_if(self, adj, *a, || {
                let x = val(*a);
                let mut out = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    out.row_mut(start + r).copy_from_slice(g.row(r));
                }
                Ok(out)
            })?,
            Op::Sum(a) => {
                let gs = g.data()[0];
                accumulate_if(self, adj, *a, || {
                    let x = val(*a);
                    Ok(Matrix::filled(x.rows(), x.cols(), gs))
                })?
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be positive, got {t}")))
    }
}

/// First index of the minimum and of the maximum.
pub(crate) fn argmin_argmax(row: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, &v) in row.iter().enumerate() {
        if v < row[lo] {
            lo = i;
        }
        if v > row[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) -> Result<()> {
    match &mut adj[id.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn accumulate_if(
    tape: &Tape,
    adj: &mut [Option<Matrix>],
    id: NodeId,
    grad: impl FnOnce() -> Result<Matrix>,
) -> Result<()> {
    if tape.wants(id) {
        accumulate(adj, id, grad()?)
    } else {
        Ok(())
    }
}
