use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 3e-2, clip: 1.0 }
    }
}

/// Adam with decoupled weight decay. Moments are stored per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        Self { config, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> f64 {
        debug_assert_eq!(grads.len(), params.len());
        let c = self.config;
        let norm = grads.iter().map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>()).sum::<f64>().sqrt();
        let clip = if c.clip > 0.0 && norm > c.clip { c.clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, clip) = (T::one(), T::of(clip));
        let step = T::of(c.lr / bc1);
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let (m, v, g) = (self.m[i].data_mut(), self.v[i].data_mut(), grads[i].data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                *w = *w * decay - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}
