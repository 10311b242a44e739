use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Reverse-mode rule for one node.
///
/// Receives the parent values, the node's own value, the incoming gradient
/// and which parents need a gradient; returns one entry per parent.
pub trait Backward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, needs: &[bool])
        -> Vec<Option<Tensor>>;
}

impl<F> Backward for F
where
    F: Fn(&[&Tensor], &Tensor, &Tensor, &[bool]) -> Vec<Option<Tensor>>,
{
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        self(inputs, output, grad, needs)
    }
}

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// A tape of tensor operations recorded during one forward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    branches: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Folds the size of a piecewise op's active set into the branch signature.
    pub fn note_branch(&mut self, active: usize) {
        self.branches = (self.branches ^ active as u64).wrapping_mul(0x0100_0000_01b3).rotate_left(5);
    }

    /// Changes whenever some recorded piecewise op switches branch on an element.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), op: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Records a node computed from `parents`. The backward rule is dropped
    /// when no parent carries a gradient.
    pub fn push<B: Backward + 'static>(&mut self, value: Tensor, parents: &[Var], op: B) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op: Option<Box<dyn Backward>> = if requires_grad { Some(Box::new(op)) } else { None };
        self.nodes.push(Node { value, parents: parents.to_vec(), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from the scalar node `root` (seed gradient 1).
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        grads[root.0] = Some(Tensor::full(&root_shape, 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> =
                node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
            let parent_grads = op.backward(&inputs, &node.value, &g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Per-node gradients produced by [`Graph::backward`]. Only leaves keep
/// their gradient.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

/// Lazily binds the tensors of a [`ParamStore`] into a graph.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self { store, vars: vec![None; store.len()], trainable }
    }

    /// Parameters bound as constants; no gradient reaches them.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, false)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn get(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.index()] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable { g.input(t) } else { g.constant(t) };
        self.vars[id.index()] = Some(v);
        v
    }

    /// Gradients aligned with the store; unused parameters get zeros.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.store.tensor(i).shape()))
            })
            .collect()
    }
}
