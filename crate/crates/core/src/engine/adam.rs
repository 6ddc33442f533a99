//! Blockwise Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad Adam settings for {name}: {self:?}")))
        }
    }
}

/// Cosine decay from 1 at `t = 0` to `final_ratio` at `t = steps - 1`.
pub fn cosine_scale(t: usize, steps: usize, final_ratio: f64) -> f64 {
    if steps <= 1 {
        return 1.0;
    }
    let s = t as f64 / (steps - 1) as f64;
    final_ratio + (1.0 - final_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}

/// Moment estimates for one flat parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Adam { config, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of `x` with gradient `g`, learning rate scaled by `lr_scale`.
    pub fn step(&mut self, x: &mut [f64], g: &[f64], lr_scale: f64) {
        assert_eq!(x.len(), self.m.len());
        assert_eq!(g.len(), self.m.len());
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let lr = c.lr * lr_scale;
        for i in 0..x.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            x[i] -= lr * mh / (vh.sqrt() + c.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut a = Adam::new(AdamConfig::with_lr(0.1), 2);
        let mut x = [1.0, -1.0];
        a.step(&mut x, &[3.0, -0.5], 1.0);
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert!((x[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut a = Adam::new(AdamConfig::with_lr(0.1), 3);
        let mut x = [0.5, 0.0, -2.0];
        for _ in 0..10 {
            a.step(&mut x, &[0.0; 3], 1.0);
        }
        assert_eq!(x, [0.5, 0.0, -2.0]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut a = Adam::new(AdamConfig::with_lr(0.05), 1);
        let mut x = [3.0];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 1.0)];
            a.step(&mut x, &g, 1.0);
        }
        assert!((x[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AdamConfig { beta1: 1.0, ..AdamConfig::with_lr(0.1) }.validate("x").is_err());
        assert!(AdamConfig::with_lr(f64::NAN).validate("x").is_err());
    }
}
