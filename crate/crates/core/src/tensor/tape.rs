use super::ops::Op;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Linear record of a forward pass.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and reverse index order is a valid backward schedule. A tape belongs to
/// one thread; build a fresh tape per forward pass.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Back-propagates from a one-element `loss`, returning gradients for
    /// every leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads = GradBuffer { slots: (0..self.nodes.len()).map(|_| None).collect() };
        if root.requires_grad {
            grads.slots[loss.0] = Some(vec![T::one()]);
        }
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads.slots[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    leaves[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                op => op.backward(&self.nodes, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Per-node gradient accumulators used during backward.
pub(crate) struct GradBuffer<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> GradBuffer<T> {
    /// Mutable accumulator for `v`, or `None` if `v` takes no gradient.
    pub(crate) fn slot<'a>(&'a mut self, nodes: &[Node<T>], v: Var) -> Option<&'a mut [T]> {
        let node = &nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.slots[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    pub(crate) fn add(&mut self, nodes: &[Node<T>], v: Var, delta: &[T]) {
        if let Some(s) = self.slot(nodes, v) {
            for (a, &d) in s.iter_mut().zip(delta) {
                *a += d;
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` if the leaf did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.get_mut(v.0).and_then(Option::take)
    }
}
