use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam hyperparameters; defaults are the usual (1e-3, 0.9, 0.999, 1e-8).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every tensor of one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = |n| vec![T::zero(); n];
        let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
        AdamState {
            config,
            step: 0,
            m: sizes.iter().map(|&n| zeros(n)).collect(),
            v: sizes.iter().map(|&n| zeros(n)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected Adam update. Gradients are left in place.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::contract("Adam state built for a different parameter set"));
        }
        for (i, t) in params.iter().map(|(_, t)| t).enumerate() {
            if t.grad().is_none() {
                return Err(Error::contract(format!(
                    "parameter `{}` has no gradient",
                    params.name(super::ParamId(i))
                )));
            }
            if t.numel() != self.m[i].len() {
                return Err(Error::contract("Adam moment shape mismatch"));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        // p -= lr * m_hat / (sqrt(v_hat) + eps)
        let step_size = T::of(c.lr / bc1);
        let sqrt_bc2 = T::of(bc2.sqrt());
        let eps = T::of(c.eps);
        let one = T::one();
        for ((t, m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let (data, grad) = t.data_and_grad_mut();
            let grad = grad.expect("checked above");
            for (((p, &g), mi), vi) in data.iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let denom = vi.sqrt() / sqrt_bc2 + eps;
                *p -= step_size * *mi / denom;
            }
        }
        Ok(())
    }
}

/// Scales all gradients by `max_norm / n` when their global L2 norm `n`
/// exceeds `max_norm`. Returns `n`.
pub fn clip_global_norm<T: Scalar>(grads: &mut [&mut [T]], max_norm: T) -> T {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum();
    let norm = T::of(sq.sqrt());
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}
