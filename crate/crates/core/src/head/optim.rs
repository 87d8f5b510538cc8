//! AdamW with decoupled weight decay applied to every parameter.

use serde::{Deserialize, Serialize};

use super::{HeadArchitecture, HeadParameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of steps taken.
    pub step: u64,
    pub m: HeadParameters,
    pub v: HeadParameters,
}

impl AdamW {
    pub fn new(config: AdamWConfig, arch: &HeadArchitecture) -> Self {
        AdamW {
            config,
            step: 0,
            m: HeadParameters::zeros(arch),
            v: HeadParameters::zeros(arch),
        }
    }

    pub fn update(&mut self, params: &mut HeadParameters, grads: &HeadParameters) {
        let c = self.config;
        self.step += 1;
        let t = self.step.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        for (((p, g), m), v) in params
            .buffers_mut()
            .zip(grads.buffers())
            .zip(self.m.buffers_mut())
            .zip(self.v.buffers_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] * decay - c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::Activation;

    fn tiny() -> HeadArchitecture {
        HeadArchitecture {
            layer_widths: vec![1],
            dropout_rates: vec![],
            activation: Activation::Relu,
        }
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let arch = tiny();
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        };
        let mut opt = AdamW::new(cfg, &arch);
        let mut p = HeadParameters::from_flat(&arch, &[2.0, 0.5]).unwrap();
        let g = HeadParameters::from_flat(&arch, &[0.3, -4.0]).unwrap();
        opt.update(&mut p, &g);
        // After one step m_hat = g and v_hat = g^2, so the move is lr * sign(g)
        // up to epsilon, on top of the decay p * (1 - lr * wd).
        let w = 2.0 * (1.0 - 0.001) - 0.1 * 0.3 / (0.3 + 1e-8);
        let b = 0.5 * (1.0 - 0.001) + 0.1 * 4.0 / (4.0 + 1e-8);
        let flat = p.flatten();
        assert!((flat[0] - w).abs() < 1e-15);
        assert!((flat[1] - b).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let arch = tiny();
        let cfg = AdamWConfig {
            learning_rate: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        };
        let mut opt = AdamW::new(cfg, &arch);
        let start = HeadParameters::from_flat(&arch, &[0.123, -7.5]).unwrap();
        let mut p = start.clone();
        let g = HeadParameters::from_flat(&arch, &[1.0, -1.0]).unwrap();
        for _ in 0..10 {
            opt.update(&mut p, &g);
        }
        assert_eq!(p, start);
    }
}
