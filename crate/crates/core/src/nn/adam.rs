use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{ForwardPass, Sequential};
use crate::nn::tape::Tape;
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, m: Vec::new(), v: Vec::new(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` is the gradient of `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&[f32]>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::state(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::state("parameter list changed between Adam steps"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or_else(|| Error::state(format!("missing gradient for parameter {i}")))?;
            if g.len() != p.len() || self.m[i].len() != p.len() {
                return Err(Error::dim(format!("parameter {i}: {} values, gradient {}", p.len(), g.len())));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - (beta1 as f64).powi(t);
        let bc2 = 1.0 - (beta2 as f64).powi(t);
        let step_size = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let g = g.expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    /// Updates every parameter of `net` from the gradients recorded for `pass`.
    pub fn step_network(&mut self, net: &mut Sequential, tape: &Tape, pass: &ForwardPass) -> Result<()> {
        let grads: Vec<Option<&[f32]>> = pass.params.iter().map(|&p| tape.grad(p)).collect();
        let mut params = net.params_mut();
        self.step(&mut params, &grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2, c.eps), (1e-3, 0.9, 0.999, 1e-8));
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default());
        let g = vec![0.0; 3];
        for _ in 0..10 {
            adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.steps(), 10);
    }

    #[test]
    fn constant_gradient_follows_closed_form() {
        // With constant g the bias-corrected moments are exactly g and g^2,
        // so each step moves by lr * g / (|g| + eps).
        let g = 0.37f32;
        let cfg = AdamConfig::default();
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut adam = Adam::new(cfg);
        let mut prev = 0.0f32;
        for t in 1..=200 {
            adam.step(&mut [&mut p], &[Some(&[g])]).unwrap();
            let now = p.data()[0];
            assert!(now < prev, "step {t} not monotone");
            let expected = -(t as f64) * cfg.lr as f64 * g as f64 / (g as f64 + cfg.eps as f64);
            assert!((now as f64 - expected).abs() < 1e-5, "t={t}: {now} vs {expected}");
            prev = now;
        }
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut [&mut p], &[None]), Err(Error::State(_))));
    }
}
