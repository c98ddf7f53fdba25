//! Low-rank adapters on frozen linear maps.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{matmul, Tensor};

use super::params::normal;

/// Trainable update `B·A` with `A: r × d_in` and `B: d_out × r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    pub a: Tensor,
    pub b: Tensor,
}

impl LowRankAdapter {
    /// Random `A`, zero `B`: an exact no-op until trained.
    pub fn new(d_out: usize, d_in: usize, rank: usize, rng: &mut Rng) -> Self {
        Self {
            a: normal(&[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros([d_out, rank]),
        }
    }

    pub fn from_parts(a: Tensor, b: Tensor) -> Result<Self> {
        let (r, _) = a.dims2()?;
        let (_, rb) = b.dims2()?;
        if r != rb {
            return Err(Error::shape("LowRankAdapter", &[b.shape()[0], r], b.shape()));
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn delta(&self) -> Tensor {
        matmul(&self.b, &self.a).expect("adapter factors are compatible")
    }

    /// `base + B·A`.
    pub fn merged(&self, base: &Tensor) -> Result<Tensor> {
        base.zip_map(&self.delta(), |w, d| w + d)
    }
}

/// Applies `(W + B·A)` to each row of `input: L × d_in`, giving `L × d_out`,
/// computed as `input·Wᵀ + (input·Aᵀ)·Bᵀ`.
pub fn apply_lora(base_weight: &Tensor, adapter: &LowRankAdapter, input: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let w = g.constant(base_weight.clone());
    let a = g.constant(adapter.a.clone());
    let b = g.constant(adapter.b.clone());
    let y = lora_linear(&mut g, x, w, Some((a, b)), None)?;
    Ok(g.value(y).clone())
}

/// Graph form of [`apply_lora`] with an optional bias. Without an adapter
/// this is a plain linear map.
pub fn lora_linear(g: &mut Graph, x: Var, w: Var, adapter: Option<(Var, Var)>, bias: Option<Var>) -> Result<Var> {
    let base = g.linear(x, w, bias)?;
    match adapter {
        None => Ok(base),
        Some((a, b)) => {
            let (d_out, _) = g.value(w).dims2()?;
            let (r, _) = g.value(a).dims2()?;
            g.value(b).expect_shape(&[d_out, r], "lora B")?;
            let down = g.linear(x, a, None)?;
            let up = g.linear(down, b, None)?;
            g.add(base, up)
        }
    }
}
