//! Adam with decoupled weight decay.

use alloc::vec::Vec;

use crate::math;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u32,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// One update. `params[i]` is decayed only when `decay[i]` holds.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], decay: &[bool]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), decay.len());
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - math::powf(c.beta1, self.step as f64);
        let bias2 = 1.0 - math::powf(c.beta2, self.step as f64);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].as_slice();
            let m = self.first[k].as_mut_slice();
            let v = self.second[k].as_mut_slice();
            let shrink = if decay[k] { 1.0 - c.lr * c.weight_decay } else { 1.0 };
            for (i, w) in p.as_mut_slice().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                *w = *w * shrink - c.lr * m_hat / (math::sqrt(v_hat) + c.eps);
            }
        }
    }
}
