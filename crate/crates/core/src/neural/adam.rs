use serde::{Deserialize, Serialize};

use super::tensor::Params;
use crate::error::{Error, Result};

/// How the per-epoch decay ratio is applied to the learning rate.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayRule {
    /// `lr <- lr * ratio`
    Multiply,
    /// `lr <- lr * (1 - ratio)`
    Complement,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_ratio: f64,
    pub decay_rule: DecayRule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_ratio: 0.2,
            decay_rule: DecayRule::Multiply,
        }
    }
}

/// Adam with bias correction and a per-epoch learning-rate decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) || !config.lr.is_finite() {
            return Err(Error::domain(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::domain("Adam betas must lie in [0, 1)"));
        }
        let factor = match config.decay_rule {
            DecayRule::Multiply => config.decay_ratio,
            DecayRule::Complement => 1.0 - config.decay_ratio,
        };
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(Error::domain(format!(
                "decay ratio {} gives a non-positive learning-rate factor",
                config.decay_ratio
            )));
        }
        Ok(AdamState {
            lr: config.lr,
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epoch_decay(&mut self) {
        self.lr *= match self.config.decay_rule {
            DecayRule::Multiply => self.config.decay_ratio,
            DecayRule::Complement => 1.0 - self.config.decay_ratio,
        };
    }

    /// One update from the gradients accumulated in `params`. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut impl Params) -> Result<()> {
        let mut bad = None;
        let mut shapes = Vec::new();
        params.visit("", &mut |name, t| {
            if bad.is_none() && t.grad().iter().any(|g| !g.is_finite()) {
                bad = Some(name.to_string());
            }
            shapes.push(t.len());
        });
        if let Some(name) = bad {
            return Err(Error::domain(format!("non-finite gradient in parameter {name}")));
        }
        if self.first.is_empty() {
            self.first = shapes.iter().map(|&n| vec![0.0; n]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != shapes.len() || self.first.iter().zip(&shapes).any(|(m, &n)| m.len() != n) {
            return Err(Error::domain("parameter layout changed between Adam steps"));
        }

        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = self.lr;
        let mut idx = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        params.visit_mut("", &mut |_, t| {
            let m = &mut first[idx];
            let v = &mut second[idx];
            idx += 1;
            let grads = t.grad().to_vec();
            for (j, (p, g)) in t.value_mut().iter_mut().zip(grads).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        });
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(params: &mut impl Params, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    params.visit("", &mut |_, t| sq += t.grad().iter().map(|g| g * g).sum::<f64>());
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        params.visit_mut("", &mut |_, t| t.grad_mut().iter_mut().for_each(|g| *g *= scale));
    }
    norm
}
