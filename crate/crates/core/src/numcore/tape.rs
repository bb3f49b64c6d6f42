//! Reverse-mode tape.
//!
//! Every operation appends one node holding its forward value and a closure
//! that maps the output gradient to parent gradients. `backward` replays the
//! nodes in reverse creation order, which is a valid topological order.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::tensor::{DiffTensor, Real};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub struct BackwardArgs<'a, T: Real> {
    pub parents: &'a [&'a DiffTensor<T>],
    pub output: &'a DiffTensor<T>,
    pub grad: &'a [T],
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T: Real> {
    value: DiffTensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    branch_hash: Option<DefaultHasher>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branch_hash: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it participates in differentiation iff `requires_grad` is set.
    pub fn leaf(&mut self, value: DiffTensor<T>) -> Var {
        let requires_grad = value.requires_grad;
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut value: DiffTensor<T>) -> Var {
        value.requires_grad = false;
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &DiffTensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends an op node. The closure is dropped when no parent needs a gradient.
    pub fn push(&mut self, value: DiffTensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Turns on recording of discrete branch decisions (ReLU masks, sampling
    /// cells). Finite-difference checks use the signature to detect stencils
    /// that straddle a non-differentiable point.
    pub fn track_branches(&mut self) {
        self.branch_hash = Some(DefaultHasher::new());
    }

    pub fn tracking_branches(&self) -> bool {
        self.branch_hash.is_some()
    }

    pub(crate) fn record_branch<H: Hash>(&mut self, decision: H) {
        if let Some(h) = &mut self.branch_hash {
            decision.hash(h);
        }
    }

    pub fn branch_signature(&self) -> Option<u64> {
        self.branch_hash.as_ref().map(|h| h.finish())
    }

    /// Reverse pass from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        self.backward_with(loss, vec![T::ONE])
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, output: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        if seed.len() != self.nodes[output.0].value.len() {
            return Err(Error::dim("backward", "seed length mismatch"));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let parents: Vec<&DiffTensor<T>> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = backward(&BackwardArgs {
                parents: &parents,
                output: &node.value,
                grad: &g,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), self.nodes[p.0].value.len());
                match &mut grads[p.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of leaf nodes after a reverse pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
