//! Reverse-mode autodiff on a recording tape.
//!
//! Every operation appends a node holding its output value plus enough
//! bookkeeping to replay the chain rule. Calling [`Tape::backward`] on a
//! scalar walks the nodes in reverse and accumulates gradients additively,
//! so values consumed by several downstream ops receive the sum of their
//! contributions. A tape is single-use: `backward` runs once, and a fresh
//! tape is built per training step (the optimizer, not the tape, owns
//! zeroing between steps).

use crate::error::{Error, Result};
use crate::ops::{self, Op};
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub value: Tensor,
    pub grad: Option<Vec<f32>>,
    pub needs_grad: bool,
    pub op: Op,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    /// Registers an input value. A gradient accumulator is attached iff the
    /// tensor was marked `requires_grad`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs = value.requires_grad();
        self.push(value, needs, Op::Leaf)
    }

    /// Registers an input that never receives gradient, whatever its flag.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub(crate) fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient for `v`; present only after `backward` and only
    /// for nodes on a path from a `requires_grad` leaf to the loss.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn accum(&mut self, v: Var, contribution: &[f32]) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let slot = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.value.numel()]);
        debug_assert_eq!(slot.len(), contribution.len());
        for (g, c) in slot.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Runs reverse-mode accumulation from a scalar loss. A second call on
    /// the same tape is rejected; build a new tape per step instead.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; record a fresh tape per step".into(),
            ));
        }
        self.backward_done = true;
        let n = self.nodes[loss.0].value.numel();
        if n != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            // Nothing upstream asked for gradient; a no-op pass is valid.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let go = self.nodes[i].grad.clone().unwrap();
            ops::apply_backward(self, &op, &go);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn gradients_accumulate_across_fanout() {
        // loss = sum(x + x): each element of x feeds the loss twice.
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).with_grad());
        let s = ops::add(&mut t, x, x).unwrap();
        let loss = ops::sum(&mut t, s).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0).with_grad());
        let loss = ops::sum(&mut t, x).unwrap();
        t.backward(loss).unwrap();
        let err = t.backward(loss).unwrap_err();
        assert!(format!("{err}").contains("already ran"));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn constants_and_unflagged_leaves_get_no_grad() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = t.leaf(Tensor::vector(vec![5.0, 6.0])); // requires_grad not set
        let ab = ops::mul(&mut t, a, b).unwrap();
        let abc = ops::add(&mut t, ab, c).unwrap();
        let loss = ops::sum(&mut t, abc).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[3.0, 4.0]);
        assert!(t.grad(b).is_none());
        assert!(t.grad(c).is_none());
    }
}
