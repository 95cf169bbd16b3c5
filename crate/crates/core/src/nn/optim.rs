use serde::{Deserialize, Serialize};

use super::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// L2 coefficient; `weight_decay * w` is added to each gradient.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Bias-corrected Adam with moment buffers per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::InvalidHyperparameter(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || !(cfg.weight_decay >= 0.0) {
            return Err(Error::InvalidHyperparameter("betas must lie in [0, 1) and weight_decay >= 0".into()));
        }
        Ok(Self { cfg, step: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Applies one update to every parameter from its accumulated gradient.
    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut Param>) -> Result<()> {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (i, p) in params.enumerate() {
            if i == self.m.len() {
                self.m.push(vec![0.0; p.value.len()]);
                self.v.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != p.value.len() {
                return Err(Error::State("optimizer state does not match parameter shapes"));
            }
            for j in 0..p.value.len() {
                let g = p.grad[j] + c.weight_decay * p.value[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.value[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
