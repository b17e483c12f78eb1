//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] is built fresh for every forward pass. Each primitive appends
//! one node whose inputs already exist on the tape, so the node vector is in
//! topological order by construction and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! Besides the usual layer primitives the tape supports two things the model
//! needs specifically:
//!
//! * [`Tape::grad_reverse`]: identity on the forward pass, negated gradient
//!   on the backward pass.
//! * [`Tape::scalar_op`]: a fused scalar-valued node whose local gradients
//!   are supplied by the caller. Losses with data-dependent structure
//!   (mined triplets, hinges) are written this way.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Normalize {
        input: NodeId,
        norms: Vec<f64>,
        degenerate: Vec<bool>,
    },
    Reverse(NodeId),
    Sum(NodeId),
    Scalar(Vec<(NodeId, Matrix)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fallback_rows: usize,
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

    /// Value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.get(0, 0)
    }

    /// Number of rows that hit the degenerate-norm fallback so far.
    pub fn normalization_fallbacks(&self) -> usize {
        self.fallback_rows
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input or parameter. Every leaf reached by the backward
    /// sweep receives a gradient.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Adds a `1 × cols` bias row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(v, Op::AddRow(a, bias)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).relu();
        self.push(v, Op::Relu(a))
    }

    /// Row-wise L2 normalization. Degenerate rows become `e₁` and pass no
    /// gradient back.
    pub fn l2_normalize(&mut self, a: NodeId) -> NodeId {
        let input = self.value(a);
        let norms: Vec<f64> = input.row_iter().map(crate::matrix::norm).collect();
        let (v, degenerate) = input.l2_normalize_rows();
        self.fallback_rows += degenerate.iter().filter(|d| **d).count();
        self.push(
            v,
            Op::Normalize {
                input: a,
                norms,
                degenerate,
            },
        )
    }

    pub fn grad_reverse(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(v, Op::Reverse(a))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// A fused scalar node with caller-supplied local gradients
    /// `∂value/∂input` for each listed input.
    pub fn scalar_op(&mut self, value: f64, local: Vec<(NodeId, Matrix)>) -> Result<NodeId> {
        for (id, g) in &local {
            if g.shape() != self.value(*id).shape() {
                return Err(Error::shape(
                    "scalar_op",
                    format!(
                        "local gradient {:?} for node of shape {:?}",
                        g.shape(),
                        self.value(*id).shape()
                    ),
                ));
            }
        }
        Ok(self.push(Matrix::scalar(value), Op::Scalar(local)))
    }

    /// Propagates `∂loss/∂node` to every node that `loss` depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: shape.0,
                cols: shape.1,
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for row in g.row_iter() {
                        for (o, v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Normalize {
                    input,
                    norms,
                    degenerate,
                } => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        if degenerate[r] {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = crate::matrix::dot(yr, gr);
                        for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = (gv - yv * proj) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *input, ga);
                }
                Op::Reverse(a) => accumulate(&mut grads, *a, g.scale(-1.0)),
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Scalar(local) => {
                    let s = g.get(0, 0);
                    for (id, lg) in local {
                        accumulate(&mut grads, *id, lg.scale(s));
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of a backward sweep, indexed by [`NodeId`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}
