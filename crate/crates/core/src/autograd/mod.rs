//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and, when any
//! input requires a gradient, a [`Backward`] rule. Nodes are only ever
//! appended, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep.

mod fused;
mod gemm;
mod loss;
mod nn;
mod ops;

pub use gemm::gemm;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs to a backward rule: the forward inputs, the forward output and the
/// upstream gradient with respect to that output.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f64],
}

/// Vector-Jacobian product for one recorded operation.
///
/// `grads[i]` is `Some` (zero-filled, input-shaped) exactly when input `i`
/// requires a gradient; implementations accumulate into it.
pub trait Backward {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &BackwardCtx<'_>, grads: &mut [Option<Vec<f64>>]);
}

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    rule: Option<Box<dyn Backward>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it collects a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            rule: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never collects a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Appends an operation result. The backward rule is dropped when no
    /// parent requires a gradient.
    pub fn record(&mut self, value: Tensor, parents: &[Var], rule: Box<dyn Backward>) -> Var {
        let needs = parents.iter().any(|p| self.requires_grad(*p));
        self.nodes.push(Node {
            value: value.with_requires_grad(needs),
            parents: parents.to_vec(),
            rule: needs.then_some(rule),
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        let out = &self.nodes[loss.0].value;
        if out.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                out.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !out.requires_grad() {
            self.backward_done = true;
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            let mut input_grads: Vec<Option<Vec<f64>>> = node
                .parents
                .iter()
                .map(|p| {
                    let pv = &self.nodes[p.0].value;
                    pv.requires_grad().then(|| vec![0.0; pv.numel()])
                })
                .collect();
            let ctx = BackwardCtx {
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                grad: &grad,
            };
            rule.backward(&ctx, &mut input_grads);
            for (p, g) in node.parents.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut self.grads[p.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }

    /// Gradient of the last backward pass for a leaf (intermediate gradients are released).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `tensor.grad` when the tensor is trainable.
    pub fn write_grad(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        if !tensor.requires_grad() {
            return Ok(());
        }
        let g = self
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tensor.numel()]);
        tensor.set_grad(g)
    }

    /// Clears gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scaling_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap().with_requires_grad(true));
        let y = tape.scale(x, 3.0);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn mse_at_minimum_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([2], vec![0.3, -1.0]).unwrap().with_requires_grad(true));
        let t = tape.constant(Tensor::new([2], vec![0.3, -1.0]).unwrap());
        let l = tape.mse(x, t).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn double_backward_rejected_until_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0).with_requires_grad(true));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
        assert!(matches!(tape.backward(y), Err(Error::State(_))));
        tape.zero_grad();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_never_get_grads() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full([2], 1.0).with_requires_grad(true));
        let x = tape.leaf(Tensor::full([2], 2.0).with_requires_grad(true));
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        let mut t = Tensor::zeros([2]);
        tape.write_grad(c, &mut t).unwrap();
        assert!(t.grad().is_none());
    }
}
