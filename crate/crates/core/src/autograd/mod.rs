//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op records its output value, its parents and a one-shot closure
//! mapping the output gradient to parent gradients. Parameters enter as
//! leaves; frozen leaves never request a gradient, so ops skip the
//! corresponding backward work entirely.

mod attention;
mod conv;
mod ops;
mod resample;

use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use conv::{conv3d_forward, Conv3dShape};
pub use ops::NormAxes;
pub use resample::upsample2_forward;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output gradient to one optional gradient per parent. The flag
/// slice says which parents actually want one.
pub type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; `backward` yields nothing.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
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

    pub fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an arbitrary differentiable op. `backward` is kept only when
    /// some parent needs a gradient.
    pub fn custom<F>(&mut self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.requires_grad(*p));
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: parents.to_vec(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Consumes the recorded closures, so a
    /// graph can be differentiated once.
    pub fn backward(&mut self, root: Var) -> Gradients<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads: leaf_grads };
        }
        let root_val = &self.nodes[root.0].value;
        assert_eq!(root_val.len(), 1, "backward root must be a scalar");
        grads[root.0] = Some(Tensor::full(root_val.shape(), T::one()));

        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &mut self.nodes[i];
            if node.parents.is_empty() {
                leaf_grads[i] = Some(gout);
                continue;
            }
            let Some(bw) = node.backward.take() else {
                continue;
            };
            let parents = node.parents.clone();
            let needs: Vec<bool> = parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let pgrads = bw(&gout, &needs);
            debug_assert_eq!(pgrads.len(), parents.len());
            for ((p, g), need) in parents.iter().zip(pgrads).zip(&needs) {
                let (Some(g), true) = (g, *need) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads: leaf_grads }
    }
}

/// Gradients of leaves reached by a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
