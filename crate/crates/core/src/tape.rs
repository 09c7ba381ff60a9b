//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`ComputationTape`] is an append-only list of nodes. Each operation
//! evaluates eagerly, stores its output, and records which nodes it read.
//! Because a node can only refer to nodes that already exist, the tape is
//! always in topological order and [`ComputationTape::backward`] is a
//! single reverse sweep that visits every node once.
//!
//! ```
//! use repsurgery::tape::ComputationTape;
//! use repsurgery::tensor::Tensor;
//!
//! let mut tape = ComputationTape::new();
//! let w = tape.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
//! let sq = tape.matmul(w, w).unwrap();
//! let grads = tape.backward(sq).unwrap();
//! assert_eq!(grads.wrt(w).item(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::loss::{self, Loss};
use crate::tensor::Tensor;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f32),
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    NormalizeRows(NodeId),
    Loss(Loss, NodeId, NodeId),
    CrossEntropy(NodeId, Vec<usize>),
    Entropy(NodeId),
    /// `base + Σ coeffs[i] · tensor`, one entry per (coefficient index, tensor).
    Combine {
        base: NodeId,
        coeffs: NodeId,
        terms: Vec<(usize, Tensor)>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ComputationTape {
    nodes: Vec<Node>,
}

impl ComputationTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::AddRow(a, b) => {
                self.requires(*a) || self.requires(*b)
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::NormalizeRows(a)
            | Op::Loss(_, a, _) => self.requires(*a),
            Op::CrossEntropy(a, _) | Op::Entropy(a) => self.requires(*a),
            Op::Combine { base, coeffs, .. } => self.requires(*base) || self.requires(*coeffs),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a trainable parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Records a value that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> Result<NodeId> {
        let v = self.value(a).scale(factor)?;
        Ok(self.push(Op::Scale(a, factor), v))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(Op::AddRow(x, bias), v))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).relu();
        Ok(self.push(Op::Relu(x), v))
    }

    /// Row-wise L2 normalization of a matrix.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).normalize_rows()?;
        Ok(self.push(Op::NormalizeRows(x), v))
    }

    /// Scalar loss between `pred` and `target`; gradients flow into `pred` only.
    pub fn loss(&mut self, loss: Loss, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let v = loss.value(self.value(pred), self.value(target))?;
        let v = finite_scalar(v, "loss")?;
        Ok(self.push(Op::Loss(loss, pred, target), v))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (v, _) = loss::cross_entropy(self.value(logits), labels)?;
        let v = finite_scalar(v, "cross_entropy")?;
        Ok(self.push(Op::CrossEntropy(logits, labels.to_vec()), v))
    }

    /// Mean softmax prediction entropy of a logit matrix.
    pub fn entropy(&mut self, logits: NodeId) -> Result<NodeId> {
        let (v, _) = loss::prediction_entropy(self.value(logits))?;
        let v = finite_scalar(v, "entropy")?;
        Ok(self.push(Op::Entropy(logits), v))
    }

    /// `base + Σ coeffs[i]·t` over `terms = [(i, t), ...]`.
    ///
    /// `coeffs` is a flat vector node; gradients reach both `base` and the
    /// coefficients, never the term tensors.
    pub fn combine(
        &mut self,
        base: NodeId,
        coeffs: NodeId,
        terms: Vec<(usize, Tensor)>,
    ) -> Result<NodeId> {
        let b = self.value(base);
        let c = self.value(coeffs).data();
        let mut acc: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
        for (i, t) in &terms {
            if t.shape() != b.shape() {
                return Err(Error::shape("combine", b.shape(), t.shape()));
            }
            let coef = *c
                .get(*i)
                .ok_or_else(|| Error::Usage(format!("coefficient index {i} out of range")))?
                as f64;
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                *a += coef * v as f64;
            }
        }
        let v = Tensor::from_parts(
            b.shape().to_vec(),
            acc.into_iter().map(|v| v as f32).collect(),
        );
        v.check_finite("combine")?;
        Ok(self.push(
            Op::Combine {
                base,
                coeffs,
                terms,
            },
            v,
        ))
    }

    /// Propagates d(loss)/d(node) for every node reachable from `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Constant) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.requires(*a) {
                        let ga = g.matmul(&self.value(*b).transpose()?)?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.requires(*b) {
                        let gb = self.value(*a).transpose()?.matmul(&g)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()?)?,
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0)?)?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.scale(*f)?)?,
                Op::AddRow(x, bias) => {
                    let cols = g.cols();
                    let mut gb = vec![0.0f64; cols];
                    for r in 0..g.rows() {
                        for (s, &v) in gb.iter_mut().zip(g.row(r)) {
                            *s += v as f64;
                        }
                    }
                    let gb = Tensor::from_parts(
                        self.value(*bias).shape().to_vec(),
                        gb.into_iter().map(|v| v as f32).collect(),
                    );
                    accumulate(&mut grads, *bias, gb)?;
                    accumulate(&mut grads, *x, g)?;
                }
                Op::NormalizeRows(x) => {
                    // dx = (g - y·(y·g)) / n per row
                    let input = self.value(*x);
                    let cols = input.cols().max(1);
                    let mut data = Vec::with_capacity(g.len());
                    for (xr, gr) in input.data().chunks(cols).zip(g.data().chunks(cols)) {
                        let n = crate::tensor::row_norm(xr);
                        let yg: f64 = xr
                            .iter()
                            .zip(gr)
                            .map(|(&a, &b)| a as f64 / n * b as f64)
                            .sum();
                        data.extend(
                            xr.iter()
                                .zip(gr)
                                .map(|(&a, &b)| ((b as f64 - a as f64 / n * yg) / n) as f32),
                        );
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), data))?;
                }
                Op::Relu(x) => {
                    let input = self.value(*x);
                    let data = g
                        .data()
                        .iter()
                        .zip(input.data())
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), data))?;
                }
                Op::Loss(l, pred, target) => {
                    let local = l.grad(self.value(*pred), self.value(*target))?;
                    accumulate(&mut grads, *pred, local.scale(g.item())?)?;
                }
                Op::CrossEntropy(logits, labels) => {
                    let (_, local) = loss::cross_entropy(self.value(*logits), labels)?;
                    accumulate(&mut grads, *logits, local.scale(g.item())?)?;
                }
                Op::Entropy(logits) => {
                    let (_, local) = loss::prediction_entropy(self.value(*logits))?;
                    accumulate(&mut grads, *logits, local.scale(g.item())?)?;
                }
                Op::Combine {
                    base,
                    coeffs,
                    terms,
                } => {
                    let mut gc = vec![0.0f64; self.value(*coeffs).len()];
                    for (i, t) in terms {
                        gc[*i] += g
                            .data()
                            .iter()
                            .zip(t.data())
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum::<f64>();
                    }
                    let gc = Tensor::from_parts(
                        self.value(*coeffs).shape().to_vec(),
                        gc.into_iter().map(|v| v as f32).collect(),
                    );
                    accumulate(&mut grads, *coeffs, gc)?;
                    accumulate(&mut grads, *base, g)?;
                }
            }
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if matches!(node.op, Op::Leaf) && slot.is_none() {
                *slot = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn finite_scalar(v: f64, op: &'static str) -> Result<Tensor> {
    let v = v as f32;
    if v.is_finite() {
        Ok(Tensor::scalar(v))
    } else {
        Err(Error::NonFinite(op))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    let slot = &mut grads[id.0];
    *slot = Some(match slot.take() {
        Some(existing) => existing.add(&g)?,
        None => g,
    });
    Ok(())
}

/// Gradients produced by one backward sweep.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`, if the loss depends on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for a leaf; disconnected leaves get an all-zero tensor.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        self.get(id)
            .cloned()
            .expect("gradient requested for a node that is not a leaf on this tape")
    }
}
