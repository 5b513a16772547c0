//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records every op of one forward pass as a node holding the
//! result tensor plus a one-shot backward closure. Nodes are appended in
//! execution order, so parents always precede children and a single reverse
//! sweep propagates gradients with each node visited exactly once. A tape
//! is confined to one logical thread; concurrent training runs use disjoint
//! tapes.

mod linalg;
mod ops;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Backward closures receive the node's gradient by value so single-parent
/// ops can forward or mutate the buffer without a copy.
pub(crate) type BackwardFn = Box<dyn FnOnce(Vec<f64>, &mut GradSink)>;

struct Node {
    value: Tensor,
    backward: Option<BackwardFn>,
    origin: Option<ParamId>,
}

/// Gradient buffers for an in-progress backward sweep.
///
/// Backward closures deposit contributions for their parents here;
/// contributions to the same node accumulate.
pub struct GradSink {
    grads: Vec<Option<Vec<f64>>>,
    wants: Vec<bool>,
}

impl GradSink {
    /// Whether gradient flow to `id` is useful (reaches a trainable leaf).
    pub fn wants(&self, id: NodeId) -> bool {
        self.wants[id.0]
    }

    /// Accumulate a ready-made contribution (moves it if the slot is empty).
    pub fn accumulate(&mut self, id: NodeId, contrib: Vec<f64>) {
        match &mut self.grads[id.0] {
            slot @ None => *slot = Some(contrib),
            Some(buf) => {
                debug_assert_eq!(buf.len(), contrib.len());
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
        }
    }

    /// Accumulate via a writer that adds into a zero-initialized buffer.
    pub fn accumulate_with(&mut self, id: NodeId, numel: usize, write: impl FnOnce(&mut [f64])) {
        let buf = self.grads[id.0].get_or_insert_with(|| vec![0.0; numel]);
        debug_assert_eq!(buf.len(), numel);
        write(buf);
    }
}

/// Linear record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, NodeId>,
    backward_done: bool,
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

    /// Value produced at `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at `id` by [`Tape::backward`], if any.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    /// Register an input tensor; gradient flow follows its `requires_grad`.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_node(value, None, None)
    }

    /// Register an input that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_node(value.with_requires_grad(false), None, None)
    }

    /// Register a stored parameter as a leaf. Repeated registration within
    /// one tape returns the same node, so gradients from all uses accumulate.
    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> NodeId {
        if let Some(&id) = self.param_leaves.get(&pid) {
            return id;
        }
        let id = self.push_node(store.get(pid).clone(), None, Some(pid));
        self.param_leaves.insert(pid, id);
        id
    }

    pub(crate) fn push_node(
        &mut self,
        mut value: Tensor,
        backward: Option<BackwardFn>,
        origin: Option<ParamId>,
    ) -> NodeId {
        value.grad = None;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            backward,
            origin,
        });
        id
    }

    /// Append an op result; `requires` is the OR of the parents' flags.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor,
        requires: bool,
        backward: BackwardFn,
    ) -> NodeId {
        let value = value.with_requires_grad(requires);
        let backward = requires.then_some(backward);
        self.push_node(value, backward, None)
    }

    pub(crate) fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every reachable leaf
    /// with `requires_grad` holds its accumulated gradient; other nodes hold
    /// none.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        self.backward_done = true;

        let mut sink = GradSink {
            grads: vec![None; self.nodes.len()],
            wants: self.nodes.iter().map(|n| n.value.requires_grad).collect(),
        };
        sink.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if sink.grads[idx].is_none() {
                continue;
            }
            if let Some(backward) = self.nodes[idx].backward.take() {
                // Interior node: consume its gradient and push to parents.
                let g = sink.grads[idx].take().expect("checked above");
                backward(g, &mut sink);
            }
        }

        // What remains in the sink belongs to leaves (and the loss itself if
        // it is a leaf); park it on the tensors.
        for (idx, slot) in sink.grads.iter_mut().enumerate() {
            if let Some(g) = slot.take() {
                if self.nodes[idx].value.requires_grad {
                    self.nodes[idx].value.grad = Some(g);
                }
            }
        }
        Ok(())
    }

    /// Copy leaf gradients onto the owning parameters (overwrites).
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Some(pid), Some(g)) = (node.origin, node.value.grad.as_ref()) {
                store.get_mut(pid).grad = Some(g.clone());
            }
        }
    }
}
