//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Each node keeps its value; nodes that depend on a gradient-requiring
//! leaf also keep a backward closure. [`Graph::backward`] walks the tape in
//! reverse and returns a [`Gradients`] table.

use std::collections::HashMap;

use crate::params::{ParamId, ParamRole, ParamStore};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs available to a backward closure.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    /// Values of the parent nodes, in the order they were passed to `apply`.
    pub inputs: Vec<&'a Tensor>,
    /// This node's forward value.
    pub output: &'a Tensor,
    /// Which parents need a gradient; others may be returned as `None`.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + Send + Sync>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Pending update of a buffer parameter (e.g. batch-norm running stats).
#[derive(Clone, Debug)]
pub struct BufferUpdate {
    pub store_uid: u64,
    pub id: ParamId,
    pub value: Tensor,
}

pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(u64, usize), Var>,
    buffer_updates: Vec<BufferUpdate>,
    training: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            buffer_updates: Vec::new(),
            training: false,
        }
    }

    /// A graph whose layers run in training mode (batch statistics, etc.).
    pub fn training() -> Self {
        Graph {
            training: true,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    /// Bind a stored parameter. Trainable entries become gradient leaves,
    /// everything else a constant. Repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let value = store.value(id).clone();
        let v = if store.role(id) == ParamRole::Trainable {
            self.variable(value)
        } else {
            self.constant(value)
        };
        self.bound.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a custom differentiable operation.
    ///
    /// `backward` receives the output gradient and must return one entry per
    /// input (shape-matched to that input) for every input flagged in
    /// `needs`. It is dropped when no input requires a gradient.
    pub fn apply(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Node {
            value,
            parents: inputs.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        })
    }

    pub fn record_buffer_update(&mut self, store_uid: u64, id: ParamId, value: Tensor) {
        self.buffer_updates.push(BufferUpdate { store_uid, id, value });
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                needs,
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Only leaves keep gradients; intermediate ones were consumed above.
        Gradients {
            grads,
            bound: self.bound.clone(),
        }
    }
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bound: HashMap<(u64, usize), Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter of `store` that took part in
    /// the pass, sorted by parameter id.
    pub fn for_store(&self, store: &ParamStore) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .bound
            .iter()
            .filter(|((uid, _), _)| *uid == store.uid())
            .filter_map(|(&(_, idx), v)| self.get(*v).map(|g| (ParamId(idx), g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

impl ParamStore {
    /// Apply buffer updates recorded against this store.
    pub fn apply_buffer_updates(&mut self, updates: &[BufferUpdate]) {
        let uid = self.uid();
        for u in updates.iter().filter(|u| u.store_uid == uid) {
            self.set_value(u.id, u.value.clone());
        }
    }
}
