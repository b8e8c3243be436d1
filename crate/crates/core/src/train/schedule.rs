//! Learning-rate schedules: the multi-step constant scheduler with warmup
//! used for pretraining, and the cosine scheduler used for preference tuning.

use crate::error::{Error, Result};

/// Constant learning rate with linear warmup and a fixed set of decay steps.
///
/// The rate ramps linearly from 0 to `base_lr` over `warmup_steps`, stays
/// constant between drops, and is multiplied by `drop_factor` at each drop
/// point. Drop `i` takes effect for steps strictly after
/// `floor(drop_fractions[i] * total_steps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiStepScheduleSpec {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub drop_fractions: Vec<f64>,
    pub drop_factor: f64,
}

impl MultiStepScheduleSpec {
    pub fn new(warmup_steps: usize, total_steps: usize, base_lr: f64) -> Self {
        MultiStepScheduleSpec {
            warmup_steps,
            total_steps,
            base_lr,
            drop_fractions: vec![0.30, 0.60, 0.90, 0.98],
            drop_factor: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::config("total_steps must be positive".to_string()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config(format!(
                "base_lr must be a positive finite number, got {}",
                self.base_lr
            )));
        }
        if !(self.drop_factor > 0.0 && self.drop_factor <= 1.0) {
            return Err(Error::config(format!(
                "drop_factor must lie in (0, 1], got {}",
                self.drop_factor
            )));
        }
        let mut prev = 0.0;
        for &f in &self.drop_fractions {
            if !(f > prev && f <= 1.0) {
                return Err(Error::config(format!(
                    "drop_fractions must be strictly increasing within (0, 1], got {:?}",
                    self.drop_fractions
                )));
            }
            prev = f;
        }
        if let Some(&first) = self.drop_fractions.first() {
            let first_drop = drop_step(first, self.total_steps);
            if self.warmup_steps >= first_drop {
                return Err(Error::config(format!(
                    "warmup_steps {} must end before the first drop at step {}",
                    self.warmup_steps, first_drop
                )));
            }
        } else if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

fn drop_step(fraction: f64, total_steps: usize) -> usize {
    (fraction * total_steps as f64).floor() as usize
}

/// Learning rate at `step` under a multi-step schedule.
///
/// Post-warmup values are computed as `base_lr * drop_factor^i`, which is
/// exact in 64-bit arithmetic whenever the factor is a power of two.
pub fn lr_at(spec: &MultiStepScheduleSpec, step: usize) -> Result<f64> {
    spec.validate()?;
    if step > spec.total_steps {
        return Err(Error::input(format!(
            "step {} is beyond total_steps {}",
            step, spec.total_steps
        )));
    }
    if step < spec.warmup_steps {
        return Ok(spec.base_lr * step as f64 / spec.warmup_steps as f64);
    }
    let drops = spec
        .drop_fractions
        .iter()
        .filter(|&&f| step > drop_step(f, spec.total_steps))
        .count();
    Ok(spec.base_lr * spec.drop_factor.powi(drops as i32))
}

/// Cosine decay with linear warmup.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineScheduleSpec {
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub base_lr: f64,
    pub min_lr: f64,
}

impl CosineScheduleSpec {
    /// Warmup 200 / max 7900, the stock preference-tuning window.
    pub fn new(base_lr: f64) -> Self {
        CosineScheduleSpec {
            warmup_steps: 200,
            max_steps: 7900,
            base_lr,
            min_lr: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.max_steps {
            return Err(Error::config(format!(
                "warmup_steps {} must be smaller than max_steps {}",
                self.warmup_steps, self.max_steps
            )));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config(format!(
                "base_lr must be a positive finite number, got {}",
                self.base_lr
            )));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::config(format!(
                "min_lr must lie in [0, base_lr], got {}",
                self.min_lr
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step` under a cosine schedule: linear warmup, then
/// `min_lr + 0.5 (base_lr - min_lr)(1 + cos(pi * progress))`.
pub fn cosine_lr_at(spec: &CosineScheduleSpec, step: usize) -> Result<f64> {
    spec.validate()?;
    if step > spec.max_steps {
        return Err(Error::input(format!(
            "step {} is beyond max_steps {}",
            step, spec.max_steps
        )));
    }
    if step < spec.warmup_steps {
        return Ok(spec.base_lr * step as f64 / spec.warmup_steps as f64);
    }
    let progress = (step - spec.warmup_steps) as f64 / (spec.max_steps - spec.warmup_steps) as f64;
    Ok(spec.min_lr
        + 0.5 * (spec.base_lr - spec.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
