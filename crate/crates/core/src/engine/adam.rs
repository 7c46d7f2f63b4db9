use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Hyper-parameters shared by every Adam state of one optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.5,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1) || !in_unit(self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::contract(format!("invalid Adam hyper-parameters {self:?}")));
        }
        Ok(())
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub step_count: u64,
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub config: AdamConfig,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            step_count: 0,
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
            config,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [S], grads: &[S], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![params.len(), grads.len()],
            });
        }
        self.step_count += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let t = self.step_count as i32;
        let (b1, b2) = (S::lit(beta1), S::lit(beta2));
        let (one_b1, one_b2) = (S::lit(1.0 - beta1), S::lit(1.0 - beta2));
        let bc1 = S::lit(1.0 - beta1.powi(t));
        let bc2 = S::lit(1.0 - beta2.powi(t));
        let lr = S::lit(lr);
        let eps = S::lit(epsilon);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + one_b1 * g;
            self.v[i] = b2 * self.v[i] + one_b2 * g * g;
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

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut st = AdamState::<f64>::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 3.0];
        st.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut st = AdamState::<f32>::new(2, AdamConfig::default());
        assert!(st.step(&mut [0.0; 3], &[0.0; 3], 0.1).is_err());
    }

    #[test]
    fn rejects_bad_betas() {
        let cfg = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
