//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its value and a closure that maps
//! the output cotangent to input cotangents. Node ids increase along the
//! forward pass, so a reverse sweep over ids is a valid reverse-topological
//! order.
//!
//! Nodes can be flagged as a *gradient barrier*. A backward pass run in
//! [`BackwardMode::BlockBarriers`] stops propagation at flagged nodes: the
//! node still receives its cotangent from downstream, but nothing flows into
//! its inputs. The trainer uses this to keep one loss term from optimizing
//! the domain-adapter parameters while every other path stays live.

mod ops;

use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};

/// Handle to a node on the tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Maps the cotangent of a node's output to cotangents of its inputs,
/// in the same order as the node's `parents` list.
type GradFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<ArrayD<T>>>;

pub(crate) struct Node<T: Scalar> {
    pub value: ArrayD<T>,
    parents: Vec<usize>,
    grad_fn: Option<GradFn<T>>,
    barrier: bool,
}

/// Whether a backward pass respects gradient barriers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardMode {
    /// Propagate through every node (true derivative of the objective).
    Full,
    /// Stop at barrier nodes; their upstream subgraph receives no gradient.
    BlockBarriers,
}

/// Cotangents keyed by tape node id, produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&ArrayD<T>> {
        self.by_node.get(var.0).and_then(|g| g.as_ref())
    }

    /// Sum another gradient set into this one (same tape).
    pub fn accumulate(&mut self, other: Gradients<T>) {
        if self.by_node.len() < other.by_node.len() {
            self.by_node.resize(other.by_node.len(), None);
        }
        for (slot, g) in self.by_node.iter_mut().zip(other.by_node) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => *acc += &g,
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
    }
}

/// The recording tape. One tape per forward/backward cycle.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub(crate) fn push(
        &mut self,
        value: ArrayD<T>,
        parents: Vec<usize>,
        grad_fn: Option<GradFn<T>>,
    ) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents,
            grad_fn,
            barrier: false,
        });
        Var(id)
    }

    /// Record an input with no upstream; gradients accumulate here.
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// Flag `var` as a gradient barrier (see [`BackwardMode::BlockBarriers`]).
    pub fn mark_barrier(&mut self, var: Var) {
        self.nodes[var.0].barrier = true;
    }

    pub fn value(&self, var: Var) -> &ArrayD<T> {
        &self.nodes[var.0].value
    }

    /// Value of a scalar-shaped node.
    pub fn scalar(&self, var: Var) -> T {
        let v = self.value(var);
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().copied().next().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar `root`. Seeds dL/droot = 1.
    ///
    /// The tape is left intact; multiple backward passes over the same
    /// forward graph are valid and their results may be summed with
    /// [`Gradients::accumulate`].
    pub fn backward(&self, root: Var, mode: BackwardMode) -> Gradients<T> {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar-shaped"
        );
        let mut by_node: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        by_node[root.0] = Some(ArrayD::from_elem(
            self.nodes[root.0].value.raw_dim(),
            T::one(),
        ));

        for id in (0..=root.0).rev() {
            let Some(grad) = by_node[id].clone() else {
                continue;
            };
            let node = &self.nodes[id];
            if mode == BackwardMode::BlockBarriers && node.barrier {
                continue;
            }
            let Some(grad_fn) = &node.grad_fn else {
                continue;
            };
            let parent_grads = grad_fn(&grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                debug_assert_eq!(
                    self.nodes[pid].value.shape(),
                    pg.shape(),
                    "gradient shape mismatch flowing into node {pid}"
                );
                match &mut by_node[pid] {
                    Some(acc) => *acc += &pg,
                    slot @ None => {
                        // Cotangents must stay standard-layout: closures
                        // reshape and slice them, and a first contribution
                        // from a degenerate matmul may arrive in another
                        // layout.
                        let pg = if pg.is_standard_layout() {
                            pg
                        } else {
                            pg.as_standard_layout().into_owned()
                        };
                        *slot = Some(pg);
                    }
                }
            }
        }
        Gradients { by_node }
    }

    /// Zero array shaped like the given node, for callers assembling
    /// gradient maps with explicit zeros.
    pub fn zeros_like(&self, var: Var) -> ArrayD<T> {
        ArrayD::zeros(IxDyn(self.value(var).shape()))
    }
}
