//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and, when any input requires a gradient, a closure that maps the output
//! gradient to input gradients. Constants never carry a closure, which is
//! also how detachment works: re-inserting a value with
//! [`Graph::constant`] cuts gradient flow.

pub mod nn;
mod ops;

use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a backward closure.
pub struct BackwardArgs<'a> {
    pub grad: &'a Tensor,
    pub out: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    /// Which inputs require a gradient; closures may skip the others.
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf whose gradient will be reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    /// Copy of `v`'s value as a gradient-free constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    #[inline]
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an operation. The closure returns one optional gradient per
    /// parent, in order; it is dropped unused when no parent needs one.
    pub fn op<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = parents.iter().any(|&p| self.requires_grad(p));
        self.push(Node {
            value,
            parents: parents.to_vec(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        })
    }

    /// Gradients of the one-element tensor `loss` with respect to every node
    /// that requires a gradient.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward() needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let args = BackwardArgs {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|p| self.value(*p)).collect(),
                needs: node.parents.iter().map(|p| self.requires_grad(*p)).collect(),
            };
            let parent_grads = backward(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.requires_grad(*p) {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.shape(*p), "gradient shape for node {}", p.0);
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of [`Graph::backward`]; only leaves keep their gradient.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf. `None` means the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub mod gradcheck {
    //! Central finite differences for gradient checks.

    use super::*;

    /// Compares analytic gradients of `f` at `inputs` against central
    /// differences with step `h`. Returns the worst relative error.
    pub fn max_grad_error<F>(inputs: &[Tensor], h: f64, f: F) -> f64
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss);

        let eval = |perturbed: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
            let loss = f(&mut g, &vars);
            g.value(loss).item()
        };

        let mut worst = 0.0f64;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
            for i in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-4));
                worst = worst.max(err);
            }
        }
        worst
    }
}
