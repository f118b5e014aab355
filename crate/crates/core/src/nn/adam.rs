use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hyperparameters for [`AdamState`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

/// Bias-corrected Adam moments for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&[f64]]) -> Self {
        let zeros = |p: &&[f64]| Tensor::zeros(&[p.len()]);
        AdamState {
            first_moment: params.iter().map(zeros).collect(),
            second_moment: params.iter().map(zeros).collect(),
            step_count: 0,
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
        }
    }

    /// One Adam update of `params` in place. Rejects non-finite gradients
    /// before touching any state.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first_moment[i].len() {
                return Err(Error::Shape(format!(
                    "tensor {i}: param {} / grad {} / moment {}",
                    p.len(),
                    g.len(),
                    self.first_moment[i].len()
                )));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient tensor {i} entry {j} = {} at adam step {}",
                    g[j],
                    self.step_count + 1
                )));
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[i].values_mut();
            let v = self.second_moment[i].values_mut();
            for k in 0..p.len() {
                let gk = g[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut adam = AdamState::new(AdamConfig::default(), &[&p]);
        adam.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // Single parameter, g = 0.5, lr = 0.1, beta1 = 0.9, beta2 = 0.95, eps = 1e-8:
        // m = 0.05, v = 0.0125, m_hat = 0.5, v_hat = 0.25,
        // update = 0.1 * 0.5 / (0.5 + 1e-8) = 0.09999999800000004.
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut p = vec![2.0];
        let mut adam = AdamState::new(cfg, &[&p]);
        adam.step(&mut [&mut p], &[&[0.5]]).unwrap();
        let update = 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - (2.0 - update)).abs() < 1e-15);
        assert!((adam.first_moment[0].values()[0] - 0.05).abs() < 1e-16);
        assert!((adam.second_moment[0].values()[0] - 0.0125).abs() < 1e-16);
    }

    #[test]
    fn constant_gradient_moves_monotonically_against_it() {
        let mut p = vec![0.0, 0.0];
        let g = [1.5, -0.25];
        let mut adam = AdamState::new(AdamConfig::default(), &[&p]);
        adam.step(&mut [&mut p], &[&g]).unwrap();
        let after_one = p.clone();
        adam.step(&mut [&mut p], &[&g]).unwrap();
        assert!(after_one[0] < 0.0 && p[0] < after_one[0]);
        assert!(after_one[1] > 0.0 && p[1] > after_one[1]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = vec![1.0];
        let mut adam = AdamState::new(AdamConfig::default(), &[&p]);
        let err = adam.step(&mut [&mut p], &[&[f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p, vec![1.0]);
        assert_eq!(adam.step_count, 0);
    }
}
