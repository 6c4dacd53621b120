use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily on the
/// first step and are tied to the parameter layout seen then.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn second_moments(&self) -> &[f64] {
        &self.v
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let n = params.num_params();
        if grads.num_params() != n {
            return Err(Error::ShapeMismatch(format!("{} gradients for {n} parameters", grads.num_params())));
        }
        if self.m.is_empty() {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
        } else if self.m.len() != n {
            return Err(Error::ShapeMismatch(format!("optimizer state for {} parameters, got {n}", self.m.len())));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let grad_tensors = grads.named_tensors();
        let mut off = 0;
        for (mut p, (_, g)) in params.tensors_mut().into_iter().zip(grad_tensors) {
            for (pv, gv) in p.iter_mut().zip(g.iter()) {
                let m = &mut self.m[off];
                let v = &mut self.v[off];
                *m = beta1 * *m + (1.0 - beta1) * gv;
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                *pv -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                off += 1;
            }
        }
        Ok(())
    }
}
