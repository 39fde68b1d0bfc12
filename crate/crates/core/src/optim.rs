//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !(self.learning_rate > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(
                "Adam needs learning_rate > 0 and epsilon > 0".into(),
            ));
        }
        if !beta_ok(self.beta1) || !beta_ok(self.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            step: 0,
            moments: Vec::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &[Moments<T>] {
        &self.moments
    }

    /// Restore a saved state; used when resuming from a checkpoint.
    pub fn restore(&mut self, step: u64, moments: Vec<Moments<T>>) {
        self.step = step;
        self.moments = moments;
    }

    /// One update of every parameter from its gradient; gradients are cleared
    /// afterwards. Every parameter must hold a gradient.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad().is_none()) {
            return Err(Error::InvalidArgument(format!(
                "parameter {} has no gradient",
                p.name()
            )));
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: vec![T::zero(); p.value().numel()],
                    v: vec![T::zero(); p.value().numel()],
                })
                .collect();
        }
        if self.moments.len() != params.len()
            || self
                .moments
                .iter()
                .zip(params.iter())
                .any(|(mo, p)| mo.m.len() != p.value().numel())
        {
            return Err(Error::InvalidArgument(
                "parameter set changed between Adam steps".into(),
            ));
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let one = T::one();
        let bias1 = one - T::of(c.beta1.powi(t));
        let bias2 = one - T::of(c.beta2.powi(t));
        let (lr, eps) = (T::of(c.learning_rate), T::of(c.epsilon));

        for (p, mo) in params.iter_mut().zip(&mut self.moments) {
            let grad = p.grad().expect("checked above").data().to_vec();
            let theta = p.value_mut().data_mut();
            for i in 0..theta.len() {
                let g = grad[i];
                mo.m[i] = b1 * mo.m[i] + (one - b1) * g;
                mo.v[i] = b2 * mo.v[i] + (one - b2) * g * g;
                let m_hat = mo.m[i] / bias1;
                let v_hat = mo.v[i] / bias2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.clear_grad();
        }
        Ok(())
    }
}
