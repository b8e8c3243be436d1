//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::model::ParamRegistry;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b >= 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Optimizer state: first and second moment estimates per parameter value,
/// laid out in registry order so checkpoint determinism carries over.
#[derive(Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamRegistry) -> Result<Self> {
        cfg.validate()?;
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Ok(AdamW { cfg, t: 0, m, v })
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update over every parameter. `grads` must align with the registry
    /// (one slice per parameter, in order). Weight decay is decoupled from
    /// the moment update: `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step(&mut self, params: &mut ParamRegistry, grads: &[&[f64]], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "{} gradient slices for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t);
        for idx in 0..params.len() {
            let p = params.param_mut(idx);
            let grad = grads[idx];
            if grad.len() != p.data.len() {
                return Err(Error::contract(format!(
                    "gradient length {} does not match parameter {} ({} values)",
                    grad.len(),
                    p.name,
                    p.data.len()
                )));
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.data[j] -=
                    lr * (m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * p.data[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Param;

    fn single_param(value: f64) -> ParamRegistry {
        ParamRegistry::from_params(vec![Param {
            name: "w".to_string(),
            shape: vec![1],
            data: vec![value],
        }])
        .unwrap()
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        let mut params = single_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &params).unwrap();
        opt.step(&mut params, &[&[2.5]], 0.01).unwrap();
        // Bias correction makes m_hat = g and v_hat = g^2 on step one, so
        // the update is lr * g / (|g| + eps), just under lr in magnitude.
        let moved = 1.0 - params.get("w").unwrap().data[0];
        assert!(moved > 0.0099 && moved <= 0.01, "moved {moved}");
    }

    #[test]
    fn quadratic_descent_converges() {
        // Minimize (x - 3)^2 with gradient 2(x - 3).
        let mut params = single_param(0.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &params).unwrap();
        for _ in 0..2000 {
            let x = params.get("w").unwrap().data[0];
            let g = 2.0 * (x - 3.0);
            opt.step(&mut params, &[&[g]], 0.01).unwrap();
        }
        let x = params.get("w").unwrap().data[0];
        assert!((x - 3.0).abs() < 1e-3, "ended at {x}");
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_param() {
        let mut params = single_param(2.0);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &params).unwrap();
        opt.step(&mut params, &[&[0.0]], 0.5).unwrap();
        // Moments stay zero, so only the decay term acts.
        let expected = 2.0 - 0.5 * 0.1 * 2.0;
        assert_eq!(params.get("w").unwrap().data[0], expected);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut params = single_param(1.0);
            let mut opt = AdamW::new(AdamWConfig::default(), &params).unwrap();
            for i in 0..50 {
                let g = (i as f64 * 0.37).sin();
                opt.step(&mut params, &[&[g]], 3e-3).unwrap();
            }
            params.get("w").unwrap().data[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn shape_mismatches_are_contract_errors() {
        let mut params = single_param(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &params).unwrap();
        assert!(opt.step(&mut params, &[], 0.01).is_err());
        assert!(opt.step(&mut params, &[&[1.0, 2.0]], 0.01).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AdamWConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamWConfig { eps: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamWConfig { weight_decay: -0.1, ..Default::default() }.validate().is_err());
        assert!(AdamWConfig::default().validate().is_ok());
    }
}
