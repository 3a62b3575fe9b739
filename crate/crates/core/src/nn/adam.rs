use serde::{Deserialize, Serialize};

use super::ApproximatorWeights;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment state for one set of weights.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub cfg: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(cfg: AdamConfig, num_params: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    /// Applies one bias-corrected Adam update. Refuses non-finite gradients
    /// without touching the state.
    pub fn step(&mut self, w: &mut ApproximatorWeights, grads: &[f64]) -> Result<()> {
        if grads.len() != self.m.len() || w.num_params() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters / {} moments",
                grads.len(),
                w.num_params(),
                self.m.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let params = w.params_mut();
        for i in 0..grads.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, ApproximatorSpec};

    fn scalar_weights() -> ApproximatorWeights {
        // 1 -> [1] -> 1 identity network has 4 parameters.
        let spec = ApproximatorSpec::new(1, vec![1], 1, Activation::Identity, 0);
        ApproximatorWeights::init(&spec).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut w = scalar_weights();
        let before = w.params().to_vec();
        let mut opt = OptimizerState::new(AdamConfig::default(), w.num_params());
        opt.step(&mut w, &[0.0; 4]).unwrap();
        assert_eq!(w.params(), &before[..]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let mut w = scalar_weights();
        let before = w.params().to_vec();
        let cfg = AdamConfig {
            lr: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(cfg, 4);
        opt.step(&mut w, &[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(w.params(), &before[..]);
    }

    #[test]
    fn two_steps_match_hand_recursion() {
        let mut w = scalar_weights();
        let p0 = w.params()[0];
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut opt = OptimizerState::new(cfg, 4);
        opt.step(&mut w, &[0.5, 0.0, 0.0, 0.0]).unwrap();
        opt.step(&mut w, &[-0.25, 0.0, 0.0, 0.0]).unwrap();
        // step 1: m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25 -> delta = 0.1 * 0.5 / 0.5
        let d1 = 0.1 * 0.5 / (0.5 + 1e-8);
        // step 2: m = 0.045 - 0.025 = 0.02, v = 0.00024975 + 0.0000625 = 0.00031225
        let m2: f64 = 0.9 * 0.05 + 0.1 * -0.25;
        let v2: f64 = 0.999 * 0.00025 + 0.001 * 0.0625;
        let d2 = 0.1 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let expected = p0 - d1 - d2;
        assert!((w.params()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_refused() {
        let mut w = scalar_weights();
        let before = w.params().to_vec();
        let mut opt = OptimizerState::new(AdamConfig::default(), 4);
        assert!(opt.step(&mut w, &[f64::NAN, 0.0, 0.0, 0.0]).is_err());
        assert_eq!(w.params(), &before[..]);
        assert_eq!(opt.step, 0);
    }
}
