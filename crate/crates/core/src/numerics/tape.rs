//! Reverse-mode differentiation over a closed set of matrix operations.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order. [`Tape::backward`] walks the nodes once, in reverse, accumulating
//! the gradient of a scalar loss into every node that depends on a leaf.
//! Constants never receive gradients.

use crate::error::{AtmError, Result};
use crate::numerics::Matrix;

/// Handle to a node on a [`Tape`].
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
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Second operand may be a `1×cols` row vector broadcast to every row.
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    MeanPoolRows(NodeId),
    ConcatRows(Vec<NodeId>),
    Mse(NodeId, NodeId),
    CrossEntropy(NodeId, Vec<usize>),
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    tracked: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `node`, or `None` when the loss does not depend on it
    /// through any tracked path (constants always report `None`).
    pub fn get(&self, node: NodeId) -> Option<&Matrix> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, node: NodeId) -> Option<Matrix> {
        self.grads.get_mut(node.0).and_then(Option::take)
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, value, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    /// A differentiable input (trainable parameter).
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// A fixed input; gradients are never propagated into it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::MatMul(a, b), value, tracked))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        let tracked = self.tracked(a);
        self.push(Op::Transpose(a), value, tracked)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Add(a, b), value, tracked))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).scale(s);
        let tracked = self.tracked(a);
        self.push(Op::Scale(a, s), value, tracked)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).relu();
        let tracked = self.tracked(a);
        self.push(Op::Relu(a), value, tracked)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).softmax_rows();
        let tracked = self.tracked(a);
        self.push(Op::SoftmaxRows(a), value, tracked)
    }

    pub fn mean_pool_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).mean_pool_rows()?;
        let tracked = self.tracked(a);
        Ok(self.push(Op::MeanPoolRows(a), value, tracked))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&values)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, tracked))
    }

    /// Mean squared error over all entries, as a `1×1` node.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let diff = self
            .value(pred)
            .sub(self.value(target))
            .map_err(|_| AtmError::dim("mse", self.value(pred).shape(), self.value(target).shape()))?;
        let n = diff.data().len().max(1) as f64;
        let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
        let tracked = self.tracked(pred) || self.tracked(target);
        Ok(self.push(Op::Mse(pred, target), Matrix::filled(1, 1, loss), tracked))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, as a `1×1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        if labels.len() != z.rows() {
            return Err(AtmError::dim("cross_entropy", z.shape(), (labels.len(), 1)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.cols()) {
            return Err(AtmError::Routing {
                index: bad,
                count: z.cols(),
            });
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = z.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let loss = total / labels.len().max(1) as f64;
        let tracked = self.tracked(logits);
        Ok(self.push(
            Op::CrossEntropy(logits, labels.to_vec()),
            Matrix::filled(1, 1, loss),
            tracked,
        ))
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let tracked = self.tracked(a);
        self.push(Op::Sum(a), value, tracked)
    }

    /// Gradient of the scalar `loss` node with respect to every tracked node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(AtmError::contract(format!(
                "backward needs a 1x1 loss node, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if self.tracked(loss) {
            grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        }

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[idx] = Some(upstream);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.tracked(a) {
                        let g = upstream.matmul(&self.value(b).transpose())?;
                        accumulate(&mut grads, a, g);
                    }
                    if self.tracked(b) {
                        let g = self.value(a).transpose().matmul(&upstream)?;
                        accumulate(&mut grads, b, g);
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, upstream.transpose()),
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.tracked(b) {
                        let g = if self.value(b).shape() == upstream.shape() {
                            upstream.clone()
                        } else {
                            column_sums(&upstream)
                        };
                        accumulate(&mut grads, b, g);
                    }
                    if self.tracked(a) {
                        accumulate(&mut grads, a, upstream);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, upstream.scale(*s)),
                Op::Relu(a) => {
                    let input = self.value(*a);
                    let mut g = upstream;
                    for (gv, x) in g.data_mut().iter_mut().zip(input.data()) {
                        if *x <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut g = upstream;
                    if cols > 0 {
                        for (g_row, y_row) in g.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                            let dot: f64 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                            for (gv, yv) in g_row.iter_mut().zip(y_row) {
                                *gv = yv * (*gv - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::MeanPoolRows(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    let inv = 1.0 / rows as f64;
                    let mut g = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            g.set(r, c, upstream.get(0, c) * inv);
                        }
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.tracked(p) {
                            accumulate(&mut grads, p, upstream.slice_rows(start, start + rows));
                        }
                        start += rows;
                    }
                }
                Op::Mse(pred, target) => {
                    let (pred, target) = (*pred, *target);
                    let diff = self.value(pred).sub(self.value(target))?;
                    let n = diff.data().len().max(1) as f64;
                    let g = diff.scale(2.0 * upstream.get(0, 0) / n);
                    if self.tracked(target) {
                        accumulate(&mut grads, target, g.scale(-1.0));
                    }
                    if self.tracked(pred) {
                        accumulate(&mut grads, pred, g);
                    }
                }
                Op::CrossEntropy(logits, labels) => {
                    let mut g = self.value(*logits).softmax_rows();
                    let scale = upstream.get(0, 0) / labels.len().max(1) as f64;
                    for (r, &label) in labels.iter().enumerate() {
                        let v = g.get(r, label);
                        g.set(r, label, v - 1.0);
                    }
                    accumulate(&mut grads, *logits, g.scale(scale));
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(shape.0, shape.1, upstream.get(0, 0)));
                }
            }
        }

        // Only leaves keep their gradients; intermediate entries were consumed.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], node: NodeId, g: Matrix) {
    match &mut grads[node.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out.set(0, c, out.get(0, c) + m.get(r, c));
        }
    }
    out
}
