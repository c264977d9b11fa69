use serde::{Deserialize, Serialize};

use crate::policy::{Gradient, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: Some(1.0),
        }
    }
}

/// Adam on a loss gradient (descent).
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Adam {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grad: &Gradient) {
        let c = self.config;
        let scale = match c.clip_norm {
            Some(max) => {
                let n = grad.norm();
                if n > max { max / n } else { 1.0 }
            }
            None => 1.0,
        };
        self.t += 1;
        let b1 = 1.0 - c.beta1.powi(self.t);
        let b2 = 1.0 - c.beta2.powi(self.t);
        for (((x, g), m), v) in params.values.iter_mut().zip(&grad.0).zip(&mut self.m).zip(&mut self.v) {
            let g = g * scale;
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            *x -= c.learning_rate * (*m / b1) / ((*v / b2).sqrt() + c.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_params, ModelConfig};

    #[test]
    fn first_step_moves_each_coordinate_by_the_learning_rate() {
        let mut p = init_params(&ModelConfig::tiny(), 1).unwrap();
        let before = p.clone();
        let mut g = Gradient::zeros_like(&p);
        g.0[0] = 3.0;
        g.0[1] = -0.5;
        let mut cfg = AdamConfig::with_lr(0.01);
        cfg.clip_norm = None;
        let mut opt = Adam::new(cfg, p.values.len());
        opt.step(&mut p, &g);
        assert!((before.values[0] - p.values[0] - 0.01).abs() < 1e-9);
        assert!((p.values[1] - before.values[1] - 0.01).abs() < 1e-9);
        assert_eq!(p.values[2], before.values[2]);
    }
}
