//! Define-by-run reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] is an append-only arena of nodes. Every op records its parent
//! indices and a backward closure; because children are always appended after
//! their parents, iterating node indices in reverse is a valid reverse
//! topological order and `backward` is a single linear sweep.
//!
//! A node participates in backprop only if it is a gradient leaf or one of its
//! parents does. Subgraphs built purely from constants and frozen leaves are
//! skipped wholesale, which is what makes frozen-encoder training stages
//! cheap.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn<S> = Box<dyn Fn(&Graph<S>, &Tensor<S>) -> Vec<Tensor<S>>>;

pub(crate) struct Node<S: Scalar> {
    pub(crate) value: Tensor<S>,
    pub(crate) parents: Vec<Var>,
    pub(crate) requires_grad: bool,
    pub(crate) backward: Option<BackwardFn<S>>,
}

pub struct Graph<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-trainable input node.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Vec::new(), false, None)
    }

    /// Graph input, optionally a gradient leaf (a trainable parameter).
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Vec::new(), requires_grad, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<S>,
        parents: Vec<Var>,
        requires_grad: bool,
        backward: Option<BackwardFn<S>>,
    ) -> Var {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node { value, parents, requires_grad, backward });
        Var(self.nodes.len() - 1)
    }

    /// Convenience for ops: child requires grad iff any parent does.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor<S>,
        parents: Vec<Var>,
        backward: BackwardFn<S>,
    ) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = if rg { Some(backward) } else { None };
        self.push(value, parents, rg, backward)
    }

    /// Reverse-mode sweep from a scalar loss. Returns per-node gradients for
    /// every gradient leaf reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        if !lv.all_finite() {
            return Err(Error::numeric("backward", format!("loss is {}", lv.data()[0])));
        }

        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), S::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &node.backward {
                let parent_grads = back(self, &g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                    match &mut grads[p.0] {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                                *a += *b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
                // Interior gradients are no longer needed once propagated.
                grads[i] = None;
            } else {
                // Leaf: keep the accumulated gradient for the caller.
                grads[i] = Some(g);
            }
        }

        Ok(Gradients { grads })
    }
}

/// Result of a backward sweep: gradients for gradient leaves.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `v`, if `v` is a gradient leaf reached by the sweep.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn backward_rejects_non_finite_loss() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::scalar(f64::NAN), true);
        assert!(matches!(g.backward(a), Err(Error::Numeric { .. })));
    }

    #[test]
    fn leaf_gradient_of_itself_is_one() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::scalar(3.0), true);
        let grads = g.backward(a).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(3.0));
        let grads = g.backward(a).unwrap();
        assert!(grads.get(a).is_none());
    }
}
