//! Reverse-mode automatic differentiation over an explicit, single-use tape.
//!
//! A [`Tape`] records every operation executed through it. [`Tape::backward`]
//! walks the record in exact reverse order and returns a [`Gradients`] table.
//! Parameters enter the tape via [`Tape::param`]; their gradients are collected
//! with [`Gradients::param_grads`].

mod attention;
mod conv;
pub mod kernels;
mod loss;
mod ops;

use std::collections::HashMap;

use crate::error::{ensure, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{check_finite, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Ctx<'a> {
    pub grad: &'a [f64],
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&Ctx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    op: &'static str,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    params: Vec<(ParamId, Var)>,
    consumed: bool,
    inference: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records values only: parameters enter as constants and no backward
    /// closures are kept.
    pub fn new_inference() -> Self {
        Self { inference: true, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), backward: None, requires_grad, op: "leaf" });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter as a gradient-requiring leaf. Repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), !self.inference);
        self.param_vars.insert(id, v);
        self.params.push((id, v));
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

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: Vec<Var>,
        backward: BackwardFn,
    ) -> Result<Var> {
        ensure!(!self.consumed, State, "tape already consumed by backward; cannot record `{op}`");
        check_finite(op, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward = requires_grad.then_some(backward);
        self.nodes.push(Node { value, inputs, backward, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a value that blocks gradient flow (no backward).
    pub(crate) fn push_detached(&mut self, op: &'static str, value: Tensor) -> Result<Var> {
        ensure!(!self.consumed, State, "tape already consumed by backward; cannot record `{op}`");
        check_finite(op, value.data())?;
        self.nodes.push(Node { value, inputs: Vec::new(), backward: None, requires_grad: false, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar `loss`, visiting recorded ops in reverse order.
    /// The tape is consumed; a second call is a state error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        ensure!(!self.consumed, State, "backward called on a consumed tape");
        ensure!(
            self.nodes[loss.0].value.len() == 1,
            Contract,
            "backward needs a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let ctx = Ctx {
                grad: &grad,
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op `{}`", node.op);
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(grad);
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not influence it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zeros when unreachable.
    pub fn wrt_or_zeros(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    }

    /// Collects parameter gradients aligned with `store`; unreachable parameters get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                out.get_mut(id).copy_from_slice(g);
            }
        }
        out
    }
}
