//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] is built fresh for every forward pass. Each recorded node owns
//! its value and a backward closure that maps the output cotangent to input
//! cotangents. Nodes are appended in evaluation order, so a reverse sweep over
//! the node list is a valid topological order.

use super::Tensor;
use crate::error::{contract_err, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Graph<T>, &[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<usize>,
    grad: Option<Vec<T>>,
}

pub struct Graph<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    swept: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            swept: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, t: &Tensor<T>, requires_grad: bool, param: Option<usize>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            param,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that is differentiated iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t, t.requires_grad(), None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t, false, None)
    }

    /// Trainable leaf tagged with a parameter slot so its gradient can be
    /// written back with [`Graph::param_grads`].
    pub fn param(&mut self, slot: usize, t: &Tensor<T>) -> Var {
        self.push_leaf(t, true, Some(slot))
    }

    pub(crate) fn record(
        &mut self,
        shape: Vec<usize>,
        value: Vec<T>,
        inputs: Vec<Var>,
        backward: BackwardFn<T>,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            inputs,
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Detached copy of a node's value.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape invariant")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Gradient of a leaf after [`Graph::backward`]; `None` if unreachable.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// `(slot, gradient)` for every parameter leaf reached by the sweep.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    /// Reverse sweep from a scalar `loss`, populating leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        if self.swept {
            return Err(contract_err!("graph already swept; record a new forward pass"));
        }
        self.swept = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(bw) = &node.backward else {
                if node.requires_grad {
                    leaf_grads.push((i, g));
                }
                continue;
            };
            let input_grads = bw(self, &g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].grad = Some(g);
        }
        // intermediates are not needed once gradients reached the leaves
        for n in &mut self.nodes {
            n.backward = None;
        }
        Ok(())
    }
}

/// Runs the reverse sweep on `graph` from `loss`.
pub fn backward<T: Scalar>(graph: &mut Graph<T>, loss: Var) -> Result<()> {
    graph.backward(loss)
}
