//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Grads, Mlp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

/// Optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    first_moment: Grads,
    second_moment: Grads,
    step_count: u64,
}

impl AdamW {
    pub fn new(params: &Mlp, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first_moment: Grads::zeros_like(params),
            second_moment: Grads::zeros_like(params),
            step_count: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update of every layer.
    pub fn step(&mut self, params: &mut Mlp, grad: &Grads) -> Result<()> {
        self.step_masked(params, grad, None)
    }

    /// One update restricted to layers with `mask[l] == true`; other layers
    /// and their moments are left untouched.
    pub fn step_masked(&mut self, params: &mut Mlp, grad: &Grads, mask: Option<&[bool]>) -> Result<()> {
        if !grad.matches(params) || !self.first_moment.matches(params) {
            return Err(Error::shape("gradient or optimizer state does not match parameters"));
        }
        if let Some(m) = mask {
            if m.len() != params.layers().len() {
                return Err(Error::shape(format!("mask has {} entries for {} layers", m.len(), params.layers().len())));
            }
        }
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        let first = &mut self.first_moment.layers;
        let second = &mut self.second_moment.layers;
        params.for_each_param_mut(|l, weight, bias| {
            if mask.is_some_and(|m| !m[l]) {
                return;
            }
            let g = &grad.layers[l];
            let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                for i in 0..p.len() {
                    m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                    v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                    let m_hat = m[i] / bias1;
                    let v_hat = v[i] / bias2;
                    p[i] = p[i] * decay - c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
                }
            };
            update(weight, g.weight.as_slice(), first[l].weight.as_mut_slice(), second[l].weight.as_mut_slice());
            update(bias, &g.bias, &mut first[l].bias, &mut second[l].bias);
        });
        Ok(())
    }
}
