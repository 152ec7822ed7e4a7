use super::Tensor;
use crate::error::{Error, Result};

/// Vector-Jacobian product of one recorded operation.
///
/// `inputs` are the values the op consumed, `output` what it produced and
/// `grad` the upstream gradient (same length as `output`). Implementations
/// return one entry per input, `None` where `needs[i]` is false.
pub trait Backward: Send + Sync {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f32],
        needs: &[bool],
    ) -> Vec<Option<Vec<f32>>>;
}

/// Handle to a value recorded on a [`Tape`].
///
/// A `Var` is only meaningful for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

/// Record of one forward pass.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a single reverse sweep is a valid topological traversal.
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

    /// A leaf that does not take part in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Appends the result of an op. The backward closure is only kept when
    /// some input participates in differentiation.
    pub fn record(&mut self, value: Tensor, inputs: &[Var], op: impl Backward + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Backward>> = if requires_grad { Some(Box::new(op)) } else { None };
        self.push(value, inputs.iter().map(|v| v.0).collect(), op, requires_grad)
    }

    fn push(
        &mut self,
        value: Tensor,
        inputs: Vec<usize>,
        op: Option<Box<dyn Backward>>,
        requires_grad: bool,
    ) -> Var {
        debug_assert!(inputs.iter().all(|&i| i < self.nodes.len()));
        self.nodes.push(Node {
            value,
            inputs,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar output. Consumes the tape.
    ///
    /// Gradients are summed over fan-out.
    pub fn backward(self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar output",
                format!("{:?}", out.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if out.requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&src, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[src].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[src].value.numel());
                match &mut grads[src] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let grads = self
            .nodes
            .into_iter()
            .zip(grads)
            .map(|(node, g)| {
                g.filter(|_| node.op.is_none() && node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients of the leaves created with [`Tape::param`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the leaf did not influence the output.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when it had no influence.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}
