use std::cell::Cell;

use crate::diff::kernels::{self, ConvGeom};
use crate::diff::tensor::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

thread_local! {
    static BACKWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of completed [`Graph::backward`] calls on this thread.
pub fn backward_passes() -> u64 {
    BACKWARD_PASSES.with(Cell::get)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv { x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom, cols: Vec<T> },
    Relu { x: NodeId },
    AvgPool2 { x: NodeId },
    Reshape { x: NodeId },
    Add { a: NodeId, b: NodeId },
    CrossEntropy { logits: NodeId, grad: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of one forward pass. Nodes are appended in evaluation order, so the
/// insertion order is a topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::State(format!("node {} not in graph of {} nodes", id.0, self.nodes.len())))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::dense_forward(&self.node(x)?.value, &self.node(w)?.value, &self.node(b)?.value)?;
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Dense { x, w, b }, rg))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (out, geom, cols) = kernels::conv2d_forward_saving(
            &self.node(x)?.value,
            &self.node(w)?.value,
            Some(&self.node(b)?.value),
            stride,
            pad,
        )?;
        let rg = self.needs(&[x, w, b]);
        // Column matrices are only needed for the weight gradient.
        let cols = if self.nodes[w.0].requires_grad { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv { x, w, b, geom, cols }, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::relu_forward(&self.node(x)?.value);
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Relu { x }, rg))
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::avg_pool2_forward(&self.node(x)?.value)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::AvgPool2 { x }, rg))
    }

    /// `[N, C, H, W] → [N, 1, 1, C·H·W]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.node(x)?.value;
        let s = v.shape();
        let out = v.clone().reshape(Shape::flat(s.n, s.per_example()))?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.node(a)?.value.add(&self.node(b)?.value)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Appends the mean cross-entropy as a `[1, 1, 1, 1]` node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<(NodeId, kernels::CrossEntropy<T>)> {
        let ce = kernels::softmax_cross_entropy(&self.node(logits)?.value, labels)?;
        let rg = self.needs(&[logits]);
        let value = Tensor::full(Shape::new(1, 1, 1, 1), T::of(ce.loss));
        let id = self.push(value, Op::CrossEntropy { logits, grad: ce.grad.clone() }, rg);
        Ok((id, ce))
    }

    /// Reverse sweep from the scalar node `output`. Only nodes that require
    /// gradients receive one.
    pub fn backward(&self, output: NodeId, seed: T) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        let out = self.node(output)?;
        if out.value.len() != 1 {
            return Err(Error::State(format!("backward seed needs a scalar node, got {}", out.value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.value.shape(), seed));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let rg = |id: NodeId| self.nodes[id.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Dense { x, w, b } => {
                    let d = kernels::dense_backward(&self.nodes[x.0].value, &self.nodes[w.0].value, &g, [
                        rg(*x),
                        rg(*w),
                        rg(*b),
                    ]);
                    accumulate(&mut grads, *x, d.dx)?;
                    accumulate(&mut grads, *w, d.dw)?;
                    accumulate(&mut grads, *b, d.db)?;
                }
                Op::Conv { x, w, b, geom, cols } => {
                    let d = kernels::conv2d_backward(geom, cols, &self.nodes[w.0].value, &g, [
                        rg(*x),
                        rg(*w),
                        rg(*b),
                    ]);
                    accumulate(&mut grads, *x, d.dx)?;
                    accumulate(&mut grads, *w, d.dw)?;
                    accumulate(&mut grads, *b, d.db)?;
                }
                Op::Relu { x } => {
                    let dx = kernels::relu_backward(&self.nodes[x.0].value, &g);
                    accumulate(&mut grads, *x, Some(dx))?;
                }
                Op::AvgPool2 { x } => {
                    let dx = kernels::avg_pool2_backward(self.nodes[x.0].value.shape(), &g);
                    accumulate(&mut grads, *x, Some(dx))?;
                }
                Op::Reshape { x } => {
                    let dx = g.reshape(self.nodes[x.0].value.shape())?;
                    accumulate(&mut grads, *x, Some(dx))?;
                }
                Op::Add { a, b } => {
                    if rg(*b) {
                        accumulate(&mut grads, *b, Some(g.clone()))?;
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, Some(g))?;
                    }
                }
                Op::CrossEntropy { logits, grad } => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *logits, Some(grad.scale(s)))?;
                }
            }
        }
        BACKWARD_PASSES.with(|c| c.set(c.get() + 1));
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Option<Tensor<T>>) -> Result<()> {
    let Some(g) = g else { return Ok(()) };
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
