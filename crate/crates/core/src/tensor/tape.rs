use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation.
///
/// `wants[i]` tells whether input `i` needs a gradient; entries for inputs
/// that don't may be `None`.
pub trait GradFn<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    grad_fn: Option<Box<dyn GradFn<T>>>,
    requires_grad: bool,
}

/// Ordered record of executed operations. Nodes are appended, so every
/// operation's inputs precede it.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can host a new forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            grad_fn: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Records an operation result. Non-finite outputs are rejected.
    pub fn push(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        grad_fn: Box<dyn GradFn<T>>,
    ) -> Result<Var> {
        if self.consumed {
            return Err(Error::Autodiff(
                "tape already differentiated; reset it before recording".into(),
            ));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: grad_fn.name(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            grad_fn: Some(grad_fn),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of shared inputs are
    /// summed over all consumers.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Autodiff(
                "backward already ran on this tape; run a new forward first".into(),
            ));
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                loss_value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::raw(
            loss_value.shape().to_vec(),
            vec![T::one()],
        ));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(grad_fn) = node.grad_fn.as_ref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let input_grads = grad_fn.backward(&grad, &inputs, &node.value, &wants)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Autodiff(format!(
                    "{} returned {} gradients for {} inputs",
                    grad_fn.name(),
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for ((&input, g), want) in node.inputs.iter().zip(input_grads).zip(wants) {
                let Some(g) = g else { continue };
                if !want {
                    continue;
                }
                if g.shape() != self.nodes[input].value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: grad_fn.name(),
                        left: g.shape().to_vec(),
                        right: self.nodes[input].value.shape().to_vec(),
                    });
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }

        // keep gradients for leaves only
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.grad_fn.is_some() || !node.requires_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the leaves that were created with `requires_grad`.
pub struct Gradients<T: Scalar = f32> {
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
