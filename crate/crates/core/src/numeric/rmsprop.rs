//! RMSprop: `v ← ρ·v + (1−ρ)·g²`, `p ← p − lr·g / √(v + ε)`.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig { learning_rate: 0.003, decay: 0.9, epsilon: 1e-8 }
    }
}

/// Optimizer state: one squared-gradient average per parameter tensor.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    mean_sq: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig) -> Self {
        RmsProp { config, mean_sq: Vec::new() }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn mean_sq(&self) -> &[Tensor] {
        &self.mean_sq
    }

    /// Update `params[i]` with `grads[i]`. The parameter list must keep the
    /// same order and shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.mean_sq.is_empty() {
            self.mean_sq = params.iter().map(|p| Tensor::zeros_like(p)).collect();
        }
        let rho = self.config.decay as Scalar;
        let lr = self.config.learning_rate as Scalar;
        let eps = self.config.epsilon as Scalar;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.mean_sq) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            for ((x, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = rho * *vi + (1.0 - rho) * gi * gi;
                if gi != 0.0 {
                    *x -= lr * gi / (*vi + eps).sqrt();
                }
            }
        }
    }
}
