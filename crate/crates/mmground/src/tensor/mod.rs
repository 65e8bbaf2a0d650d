//! Tape-based reverse-mode differentiation over `ndarray` tensors.
//!
//! Every fused operation stores a backward closure capturing `Arc` clones of
//! whatever it needs. `backward` walks the tape in reverse creation order,
//! which is a valid reverse topological order because operands must exist
//! before the ops that consume them.

mod ops;

pub mod gradcheck;

#[cfg(test)]
mod tests;

pub use ops::AttentionProbs;

use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use std::sync::Arc;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>, &mut GradStore<F>)>;

struct Node<F: Scalar> {
    value: Arc<ArrayD<F>>,
    backward: Option<BackwardFn<F>>,
}

/// Per-node gradient slots, indexed by `Var`.
pub struct GradStore<F: Scalar>(Vec<Option<ArrayD<F>>>);

impl<F: Scalar> GradStore<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.0[v.0].take()
    }

    pub(crate) fn accum(&mut self, id: usize, contribution: ArrayD<F>) {
        match &mut self.0[id] {
            Some(existing) => *existing += &contribution,
            slot @ None => *slot = Some(contribution),
        }
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// Inference-only tape: values flow, backward closures are skipped.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input (parameter). Cheap: shares the Arc.
    pub fn leaf(&mut self, value: Arc<ArrayD<F>>) -> Var {
        self.push(value, None)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push(Arc::new(value), None)
    }

    pub fn scalar(&mut self, x: F) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), x))
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<ArrayD<F>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn scalar_value(&self, v: Var) -> F {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar_value called on non-scalar");
        *val.iter().next().unwrap()
    }

    pub(crate) fn push(
        &mut self,
        value: Arc<ArrayD<F>>,
        backward: Option<BackwardFn<F>>,
    ) -> Var {
        let backward = if self.grad_enabled { backward } else { None };
        self.nodes.push(Node { value, backward });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar root. Returns gradient slots; leaves keep
    /// their accumulated gradients, intermediates are consumed as it walks.
    pub fn backward(&self, root: Var) -> GradStore<F> {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        let mut store = GradStore(vec![None; self.nodes.len()]);
        let seed = ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), F::one());
        store.0[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            if self.nodes[id].backward.is_some() {
                if let Some(grad) = store.0[id].take() {
                    (self.nodes[id].backward.as_ref().unwrap())(&grad, &mut store);
                }
            }
        }
        store
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}
