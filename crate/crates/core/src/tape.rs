//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] is an append-only arena: every operation pushes one node
//! holding its forward value and references to earlier nodes, so the graph
//! is acyclic by construction. [`Tape::backward`] walks the arena in reverse
//! and accumulates adjoints.
//!
//! Leaves come in two kinds. [`Tape::param`] creates a differentiable leaf
//! whose gradient is reported; [`Tape::constant`] creates a detached input
//! that never receives an adjoint. Frozen encoder weights and target
//! embeddings enter the tape as constants.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Supported elementwise activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Matrix times a 1×1 node.
    ScaleBy(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Activate(NodeId, Activation),
    Exp(NodeId),
    Square(NodeId),
    NormalizeRows(NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Mean over rows of `-log softmax(row)[i]` evaluated at the diagonal.
    DiagonalCrossEntropy(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    /// True when a parameter leaf is reachable through this node's inputs.
    tracked: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        self.value(id).value()
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Param)
    }

    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Param, value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(Op::MatMul(a, b), v, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push_op(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push_op(Op::Sub(a, b), v, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push_op(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).scale(factor)?;
        Ok(self.push_op(Op::Scale(a, factor), v, &[a]))
    }

    /// Multiplies every entry of `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let factor = self.value(s).value()?;
        let v = self.value(a).scale(factor)?;
        Ok(self.push_op(Op::ScaleBy(a, s), v, &[a, s]))
    }

    /// Broadcast-adds the `1 × n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row(self.value(bias))?;
        Ok(self.push_op(Op::AddRow(a, bias), v, &[a, bias]))
    }

    pub fn activate(&mut self, a: NodeId, act: Activation) -> Result<NodeId> {
        let v = self.value(a).map(|x| act.apply(x))?;
        Ok(self.push_op(Op::Activate(a, act), v, &[a]))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.activate(a, Activation::Relu)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.activate(a, Activation::Tanh)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp)?;
        Ok(self.push_op(Op::Exp(a), v, &[a]))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x)?;
        Ok(self.push_op(Op::Square(a), v, &[a]))
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).l2_normalize_rows()?;
        Ok(self.push_op(Op::NormalizeRows(a), v, &[a]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push_op(Op::Transpose(a), v, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Matrix::scalar(self.value(a).sum())?;
        Ok(self.push_op(Op::Sum(a), v, &[a]))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.value(a);
        if m.is_empty() {
            return Err(Error::contract("mean of an empty matrix"));
        }
        let v = Matrix::scalar(m.sum() / m.len() as f64)?;
        Ok(self.push_op(Op::Mean(a), v, &[a]))
    }

    /// Softmax cross-entropy of each row of a square logit matrix against
    /// its diagonal entry, averaged over rows.
    ///
    /// Rows are shifted by their maximum before exponentiation.
    pub fn diagonal_cross_entropy(&mut self, logits: NodeId) -> Result<NodeId> {
        let l = self.value(logits);
        if l.rows() != l.cols() || l.rows() == 0 {
            return Err(Error::Dimension {
                op: "diagonal_cross_entropy",
                left: l.shape(),
                right: crate::error::Shape(l.rows(), l.rows()),
            });
        }
        let k = l.rows();
        let mut total = 0.0;
        for i in 0..k {
            let row = l.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom = row.iter().fold(0.0, |acc, &x| acc + (x - max).exp());
            total += denom.ln() - (row[i] - max);
        }
        let v = Matrix::scalar(total / k as f64)?;
        Ok(self.push_op(Op::DiagonalCrossEntropy(logits), v, &[logits]))
    }

    /// Propagates adjoints from the scalar `root` back to every node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.rows() != 1 || root_value.cols() != 1 {
            return Err(Error::contract(format!(
                "backward needs a 1x1 root, got {}",
                root_value.shape()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::scalar(1.0)?);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            match node.op {
                Op::Param | Op::Constant => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.tracked(a) {
                        let ga = g.matmul(&self.value(b).transpose())?;
                        accumulate(&mut adj, a, ga)?;
                    }
                    if self.tracked(b) {
                        let gb = self.value(a).transpose().matmul(&g)?;
                        accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    self.send(&mut adj, a, || Ok(g.clone()))?;
                    self.send(&mut adj, b, || Ok(g.clone()))?;
                }
                Op::Sub(a, b) => {
                    self.send(&mut adj, a, || Ok(g.clone()))?;
                    self.send(&mut adj, b, || g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    self.send(&mut adj, a, || g.hadamard(self.value(b)))?;
                    self.send(&mut adj, b, || g.hadamard(self.value(a)))?;
                }
                Op::Scale(a, factor) => {
                    self.send(&mut adj, a, || g.scale(factor))?;
                }
                Op::ScaleBy(a, s) => {
                    let factor = self.value(s).value()?;
                    self.send(&mut adj, a, || g.scale(factor))?;
                    self.send(&mut adj, s, || Matrix::scalar(g.hadamard(self.value(a))?.sum()))?;
                }
                Op::AddRow(a, bias) => {
                    self.send(&mut adj, a, || Ok(g.clone()))?;
                    self.send(&mut adj, bias, || Ok(g.column_sums()))?;
                }
                Op::Activate(a, act) => {
                    let y = &node.value;
                    self.send(&mut adj, a, || {
                        let local = match act {
                            Activation::Relu => y.map(|v| if v > 0.0 { 1.0 } else { 0.0 })?,
                            Activation::Tanh => y.map(|v| 1.0 - v * v)?,
                        };
                        g.hadamard(&local)
                    })?;
                }
                Op::Exp(a) => {
                    self.send(&mut adj, a, || g.hadamard(&node.value))?;
                }
                Op::Square(a) => {
                    self.send(&mut adj, a, || g.hadamard(&self.value(a).scale(2.0)?))?;
                }
                Op::NormalizeRows(a) => {
                    self.send(&mut adj, a, || normalize_rows_backward(self.value(a), &node.value, &g))?;
                }
                Op::Transpose(a) => {
                    self.send(&mut adj, a, || Ok(g.transpose()))?;
                }
                Op::Sum(a) => {
                    let s = g.value()?;
                    let shape = self.value(a).shape();
                    self.send(&mut adj, a, || Matrix::new(shape.0, shape.1, vec![s; shape.0 * shape.1]))?;
                }
                Op::Mean(a) => {
                    let shape = self.value(a).shape();
                    let s = g.value()? / (shape.0 * shape.1) as f64;
                    self.send(&mut adj, a, || Matrix::new(shape.0, shape.1, vec![s; shape.0 * shape.1]))?;
                }
                Op::DiagonalCrossEntropy(l) => {
                    let s = g.value()?;
                    self.send(&mut adj, l, || diagonal_cross_entropy_backward(self.value(l), s))?;
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Param => Some(
                    adj.get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| Matrix::zeros(n.value.rows(), n.value.cols())),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn send(
        &self,
        adj: &mut [Option<Matrix>],
        target: NodeId,
        grad: impl FnOnce() -> Result<Matrix>,
    ) -> Result<()> {
        if self.tracked(target) {
            accumulate(adj, target, grad()?)?;
        }
        Ok(())
    }

    fn push_op(&mut self, op: Op, value: Matrix, inputs: &[NodeId]) -> NodeId {
        let tracked = inputs.iter().any(|&i| self.tracked(i));
        self.push(op, value, tracked)
    }

    fn push(&mut self, op: Op, value: Matrix, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, value, tracked });
        NodeId(self.nodes.len() - 1)
    }
}

fn accumulate(adj: &mut [Option<Matrix>], target: NodeId, grad: Matrix) -> Result<()> {
    let slot = &mut adj[target.0];
    *slot = Some(match slot.take() {
        Some(existing) => existing.add(&grad)?,
        None => grad,
    });
    Ok(())
}

/// For `y = x / ‖x‖` per row: `dx = (dy − y·(y·dy)) / ‖x‖`.
fn normalize_rows_backward(x: &Matrix, y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    let norms = x.row_norms();
    let cols = x.cols();
    let mut out = vec![0.0; x.len()];
    for (r, &norm) in norms.iter().enumerate() {
        let yr = y.row(r);
        let gr = dy.row(r);
        let dot = yr.iter().zip(gr).fold(0.0, |acc, (a, b)| acc + a * b);
        for c in 0..cols {
            out[r * cols + c] = (gr[c] - yr[c] * dot) / norm;
        }
    }
    Matrix::new(x.rows(), cols, out)
}

/// `d/dL mean_i CE_i = (softmax(L) − I) / k`, scaled by the upstream adjoint.
fn diagonal_cross_entropy_backward(logits: &Matrix, upstream: f64) -> Result<Matrix> {
    let k = logits.rows();
    let scale = upstream / k as f64;
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom = row.iter().fold(0.0, |acc, &x| acc + (x - max).exp());
        for j in 0..k {
            let p = (row[j] - max).exp() / denom;
            let target = if i == j { 1.0 } else { 0.0 };
            out[i * k + j] = (p - target) * scale;
        }
    }
    Matrix::new(k, k, out)
}

/// Adjoints of every parameter leaf after [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the root with respect to a parameter leaf.
    ///
    /// Parameters the root does not depend on get a zero matrix. Returns
    /// `None` for constants and intermediate nodes, which carry no adjoint.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, id: NodeId) -> Result<&Matrix> {
        self.get(id)
            .ok_or_else(|| Error::contract(format!("node {} is not a parameter leaf", id.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_rows(&[[1.0, 2.0]]).unwrap());
        let sq = t.square(x).unwrap();
        let root = t.sum(sq).unwrap();
        let g = t.backward(root).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_root_gives_zero_gradients() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_rows(&[[1.0, 2.0]]).unwrap());
        let c = t.constant(Matrix::scalar(5.0).unwrap());
        let g = t.backward(c).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[[-1.0, 0.0, 2.0]]).unwrap());
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(0.0).unwrap());
        let y = t.tanh(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().value().unwrap(), 1.0);
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut t = Tape::new();
        let w = t.constant(Matrix::from_rows(&[[1.0], [2.0]]).unwrap());
        let x = t.param(Matrix::from_rows(&[[0.5, -0.5]]).unwrap());
        let y = t.matmul(x, w).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        // root = sum(x * x) through Mul with the same input twice.
        let mut t = Tape::new();
        let x = t.param(Matrix::from_rows(&[[3.0, -1.0]]).unwrap());
        let y = t.mul(x, x).unwrap();
        let root = t.sum(y).unwrap();
        let g = t.backward(root).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn diagonal_cross_entropy_uniform_is_log_k() {
        let mut t = Tape::new();
        let l = t.constant(Matrix::zeros(4, 4));
        let ce = t.diagonal_cross_entropy(l).unwrap();
        assert!((t.scalar_value(ce).unwrap() - 4f64.ln()).abs() < 1e-15);
    }
}
