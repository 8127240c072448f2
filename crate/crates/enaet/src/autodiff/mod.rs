//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass as an append-only
//! list of nodes, so node ids are already in topological order. Calling
//! [`Tape::backward`] walks the list in reverse and accumulates gradients
//! into every node that was created with `needs_grad`.
//!
//! The op set is exactly what the training objective needs: dense and
//! convolutional layers, batch normalization, ReLU, softmax variants, channel
//! concatenation, pooling and a handful of elementwise/reduction primitives.
//! Everything is CPU-side `ndarray` with `f64` elements, which keeps
//! finite-difference checks tight and runs bit-identically across repeats.

mod conv;
mod norm;
mod ops;

pub mod check;

pub use conv::{conv2d_raw, ConvSpec};
pub use norm::{batchnorm_eval_raw, BatchStats, BN_EPS};
pub use ops::{log_softmax_rows, softmax_rows, softmax_vec};

use ndarray::ArrayD;
use std::rc::Rc;

/// Dense tensor of `f64` used throughout the library.
pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Backward closure: receives the gradient w.r.t. the node output and
/// returns one gradient per parent, in parent order.
type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

pub(crate) struct Node {
    value: Rc<Tensor>,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Records one forward pass and computes gradients on demand.
#[derive(Default)]
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

    /// A differentiable leaf (model parameter).
    pub fn param(&mut self, value: Rc<Tensor>) -> NodeId {
        self.push(value, vec![], None, true)
    }

    /// A non-differentiable leaf (input data, detached target).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Rc::new(value), vec![], None, false)
    }

    pub fn constant_rc(&mut self, value: Rc<Tensor>) -> NodeId {
        self.push(value, vec![], None, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub(crate) fn value_rc(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes[id.0].value)
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Value of a rank-0 (or single-element) node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "scalar() on a node with {} elements", v.len());
        v.iter().next().copied().unwrap()
    }

    pub(crate) fn push(
        &mut self,
        value: Rc<Tensor>,
        parents: Vec<NodeId>,
        backward: Option<BackwardFn>,
        leaf_needs_grad: bool,
    ) -> NodeId {
        let needs_grad = if parents.is_empty() {
            leaf_needs_grad
        } else {
            parents.iter().any(|p| self.nodes[p.0].needs_grad)
        };
        self.nodes.push(Node {
            value,
            parents,
            backward: if needs_grad { backward } else { None },
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Reverse pass seeded with `d(root)/d(root) = 1`. `root` must be scalar.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        let seed = Tensor::ones(self.nodes[root.0].value.raw_dim());
        assert_eq!(seed.len(), 1, "backward() root must be a scalar node");
        grads[root.0] = Some(seed);

        for id in (0..=root.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let Some(backward) = &self.nodes[id].backward else {
                continue;
            };
            let g = grads[id].as_ref().unwrap();
            let parent_grads = backward(g);
            debug_assert_eq!(parent_grads.len(), self.nodes[id].parents.len());
            for (parent, pg) in self.nodes[id].parents.iter().zip(parent_grads) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of a backward pass: gradients indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. `id`, or `None` if no gradient reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}
