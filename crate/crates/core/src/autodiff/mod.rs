//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! the output value plus a backward closure. [`Tape::backward`] walks the
//! nodes in reverse creation order (a topological order by construction),
//! propagating gradients to every leaf and accumulating the gradients of
//! parameter leaves into the supplied [`ParamSet`].

mod gradcheck;
pub mod ops;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckResult};

use std::cell::RefCell;

use crate::error::{shape_err, Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Backward rule of one node: maps the gradient at the node's output to
/// `(parent index, parent gradient)` contributions.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

pub(crate) struct Node {
    value: Tensor,
    /// Name of the parameter this leaf mirrors, if any.
    param: Option<String>,
    backward: Option<BackwardFn>,
}

/// Gradients of one backward pass, indexed by the `Var` handles of the
/// forward graph. Leaves that were never reached hold `None`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Records a leaf holding `value`. Leaves receive gradients (readable
    /// from the returned [`Gradients`]) but are not tied to a parameter.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Node {
            value,
            param: None,
            backward: None,
        })
    }

    /// Records a leaf mirroring parameter `name`; backward passes add the
    /// leaf's gradient into that parameter's stored grad.
    pub fn param(&self, params: &ParamSet, name: &str) -> Result<Var> {
        let value = params.get(name)?.value.clone();
        Ok(self.push(Node {
            value,
            param: Some(name.to_string()),
            backward: None,
        }))
    }

    pub(crate) fn push_op(&self, value: Tensor, backward: BackwardFn) -> Var {
        self.push(Node {
            value,
            param: None,
            backward: Some(backward),
        })
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// The value held at `var` (shared storage, cheap).
    pub fn value(&self, var: Var) -> Tensor {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn dims(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.dims().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Reverse-mode sweep from scalar `loss`.
    ///
    /// Increments `Parameter.grad` for every parameter leaf reachable from
    /// `loss`; repeated calls keep accumulating. Returns the full gradient
    /// table so callers can also read gradients of non-parameter leaves.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = nodes
            .get(loss.0)
            .ok_or_else(|| shape_err!("backward: unknown var"))?;
        if loss_node.value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got dims {:?}",
                loss_node.value.dims()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(vec![1], 1.0)?);

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].clone() else {
                continue;
            };
            let node = &nodes[idx];
            debug_assert_eq!(grad.dims(), node.value.dims(), "gradient dims drifted");
            if let Some(backward) = &node.backward {
                for (parent, contribution) in backward(&grad) {
                    debug_assert!(parent < idx, "tape order violated");
                    match &grads[parent] {
                        Some(existing) => grads[parent] = Some(existing.add(&contribution)?),
                        None => grads[parent] = Some(contribution),
                    }
                }
            }
        }

        for (idx, node) in nodes.iter().enumerate() {
            if let (Some(name), Some(grad)) = (&node.param, &grads[idx]) {
                params.accumulate_grad(name, grad)?;
            }
        }

        Ok(Gradients { grads })
    }
}
