use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 penalty: `λ·θ` is added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

struct Moments {
    m: Tensor,
    v: Tensor,
    step: i32,
}

/// Adam with per-parameter step counts. Parameters that are frozen or
/// received no gradient are left untouched, decay included.
pub struct Adam {
    config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step(&mut self, params: &[&Param], grads: &GradStore) -> Result<()> {
        let c = self.config;
        for p in params.iter().filter(|p| p.trainable()) {
            let Some(g) = grads.get(p.var().as_tensor()) else {
                continue;
            };
            let theta = p.value();
            let g = if c.weight_decay != 0.0 {
                (g + (&theta * c.weight_decay)?)?
            } else {
                g.clone()
            };
            let s = match self.state.remove(p.name()) {
                Some(s) => s,
                None => Moments {
                    m: g.zeros_like()?,
                    v: g.zeros_like()?,
                    step: 0,
                },
            };
            let step = s.step + 1;
            let m = ((s.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((s.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / (1.0 - c.beta1.powi(step)))?;
            let v_hat = (&v / (1.0 - c.beta2.powi(step)))?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            p.set(&(theta - (update * c.learning_rate)?)?)?;
            self.state.insert(p.name().to_owned(), Moments { m, v, step });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Tensor};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::new("w", &Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        p.set_trainable(true);
        let loss = p.tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        adam.step(&[&p], &grads).unwrap();
        let v = p.to_vec().unwrap();
        // bias-corrected first step is lr·sign(g)
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let p = Param::new("w", &Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let loss = p.var().as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let before = p.checksum().unwrap();
        Adam::new(AdamConfig::default()).step(&[&p], &grads).unwrap();
        assert_eq!(p.checksum().unwrap(), before);
    }
}
