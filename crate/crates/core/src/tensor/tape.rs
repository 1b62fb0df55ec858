//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value, the ids of
//! its inputs and (when any input requires a gradient) a closure computing
//! vector-Jacobian products. Node ids are assigned in recording order, so
//! the tape is topologically sorted by construction and `backward` simply
//! walks it in reverse.

use super::{Scalar, Tensor};
use crate::error::{dim_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees: the forward inputs and output, the
/// gradient arriving at the output, and which inputs need a gradient.
pub struct BackwardCtx<'a, T> {
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    pub grad: &'a [T],
    pub needs: &'a [bool],
}

/// Returns one optional gradient buffer per input, shaped like that input.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records an input value. Trainable parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Node { value, inputs: Vec::new(), backward: None, requires_grad })
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Appends an operation. The closure is dropped when no input requires
    /// a gradient, so constant subgraphs cost nothing in `backward`.
    pub fn record(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn<T>> =
            if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(Node { value, inputs: inputs.to_vec(), backward, requires_grad })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of every `backward` call so far, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v), g.to_vec()).expect("gradient matches value shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Back-propagates from a scalar loss, accumulating into stored grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(dim_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_with(loss, &[T::one()])
    }

    /// Back-propagates an arbitrary cotangent `seed` (shaped like `output`),
    /// i.e. computes the vector-Jacobian product `seed^T d(output)/d(leaves)`.
    pub fn backward_with(&mut self, output: Var, seed: &[T]) -> Result<()> {
        let out_numel = self.nodes[output.0].value.numel();
        if seed.len() != out_numel {
            return Err(dim_err(
                "backward",
                format!("seed has {} elements, output has {out_numel}", seed.len()),
            ));
        }
        let mut local: Vec<Option<Vec<T>>> = Vec::new();
        local.resize_with(output.0 + 1, || None);
        local[output.0] = Some(seed.to_vec());

        for i in (0..=output.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(bw) = &node.backward {
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> =
                    node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                let ctx = BackwardCtx { inputs: &inputs, output: &node.value, grad: &g, needs: &needs };
                let contributions = bw(&ctx);
                debug_assert_eq!(contributions.len(), node.inputs.len());
                for ((v, c), need) in node.inputs.iter().zip(contributions).zip(&needs) {
                    if let (Some(c), true) = (c, *need) {
                        debug_assert_eq!(c.len(), self.nodes[v.0].value.numel());
                        accumulate(&mut local[v.0], c);
                    }
                }
            }
            accumulate(&mut self.grads[i], g);
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        None => *slot = Some(g),
    }
}

/// Shorthand used by backward closures for inputs that need no gradient.
pub(crate) fn when<T>(need: bool, f: impl FnOnce() -> Vec<T>) -> Option<Vec<T>> {
    need.then(f)
}
