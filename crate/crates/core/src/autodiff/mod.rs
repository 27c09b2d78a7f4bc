//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value, its parents, and a
//! vector-Jacobian product closure. [`Tape::backward`] replays the closures in
//! reverse recording order. Nodes whose parents do not require gradients keep
//! no closure, so inference runs never pay for backward bookkeeping.

mod ops;

pub use ops::{BinaryOp, ReduceOp, UnaryOp};

use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Computes parent gradients from `(parent values, output value, output grad,
/// which parents need a gradient)`. Entries for parents that need none may be
/// `None`.
pub(crate) type VjpFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    parents: Vec<Var>,
    vjp: Option<VjpFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            parents: Vec::new(),
            vjp: None,
        });
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub(crate) fn push_op(&mut self, value: Tensor, parents: &[Var], vjp: VjpFn) -> Var {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            let parents_finite = parents.iter().all(|p| self.nodes[p.0].value.all_finite());
            assert!(
                !parents_finite,
                "op produced non-finite values from finite inputs (shape {:?})",
                value.shape()
            );
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            parents: parents.to_vec(),
            vjp: requires_grad.then_some(vjp),
        });
        Var(self.nodes.len() - 1)
    }

    /// Accumulates `d(loss)/d(leaf)` into every reachable trainable leaf.
    /// Calling it again without [`Tape::zero_grad`] adds to existing grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.nodes[loss.0].value.numel();
        if n != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.vjp {
                None => {
                    if node.requires_grad {
                        match &mut self.nodes[i].grad {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
                Some(vjp) => {
                    let parent_vals: Vec<&Tensor> =
                        node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                    let needs: Vec<bool> =
                        node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
                    let grads = vjp(&parent_vals, &node.value, &g, &needs);
                    debug_assert_eq!(grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(grads) {
                        let Some(pg) = pg else { continue };
                        if !self.nodes[p.0].requires_grad {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                        match &mut pending[p.0] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = tape.reduce(x, ReduceOp::Sum).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.reduce(sq, ReduceOp::Sum).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let s = tape.reduce(x, ReduceOp::Sum).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        assert!(matches!(
            tape.backward(x),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let x = tape.leaf(Tensor::ones(&[2]));
        let y = tape.mul(c, x).unwrap();
        let s = tape.reduce(y, ReduceOp::Sum).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // d(f+g) == df + dg
        let x0 = Tensor::new(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let grad_of = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let f = tape.unary(x, UnaryOp::Exp).unwrap();
            let f = tape.reduce(f, ReduceOp::Sum).unwrap();
            let g = tape.mul(x, x).unwrap();
            let g = tape.reduce(g, ReduceOp::Mean).unwrap();
            let loss = match which {
                0 => f,
                1 => g,
                _ => tape.add(f, g).unwrap(),
            };
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().clone()
        };
        let mut sum = grad_of(0);
        sum.add_assign(&grad_of(1));
        assert!(sum.max_abs_diff(&grad_of(2)) < 1e-15);
    }
}
