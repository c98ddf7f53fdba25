//! AdamW (decoupled weight decay).

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// One update. `t` is the 1-based count of updates applied to this
    /// moment pair, including this one.
    pub fn step(&self, param: &mut Tensor, grad: &Tensor, moments: &mut Moments, t: u64, decay: bool) {
        debug_assert_eq!(param.shape(), grad.shape());
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let wd = if decay { self.weight_decay } else { 0.0 };
        let p = param.data_mut();
        let (m, v) = (moments.m.data_mut(), moments.v.data_mut());
        for (i, &g) in grad.data().iter().enumerate() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + wd * p[i]);
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

impl Moments {
    pub fn zeros_like(t: &Tensor) -> Self {
        Self {
            m: Tensor::zeros(t.shape().to_vec()),
            v: Tensor::zeros(t.shape().to_vec()),
        }
    }
}
