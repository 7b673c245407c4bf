//! Linear warmup followed by cosine decay, with the peak rate scaled by batch size.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_lr: 0.1,
            batch_size: 256,
            warmup_epochs: 5,
            total_epochs: 120,
            steps_per_epoch: 100,
        }
    }
}

impl ScheduleConfig {
    /// `(B / 256) * base_lr`.
    pub fn peak_lr(&self) -> f64 {
        self.batch_size as f64 / 256.0 * self.base_lr
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.total_epochs == 0 {
            return Err(Error::config(
                "schedule: batch size, steps per epoch and epochs must be positive",
            ));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::config(format!(
                "schedule: warmup_epochs {} must be smaller than total epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("schedule: base_lr {} is invalid", self.base_lr)));
        }
        Ok(())
    }
}

/// Learning rate for optimisation step `step` (0-based).
///
/// Warmup: `peak * (step + 1) / warmup_steps`, reaching `peak` on the last
/// warmup step. Afterwards `peak * 0.5 * (1 + cos(pi * t / T))` with `t` the
/// step count since warmup and `T` the number of post-warmup steps.
pub fn lr_at(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    let total = cfg.total_steps();
    if step >= total {
        return Err(Error::config(format!(
            "lr_at: step {step} outside schedule of {total} steps"
        )));
    }
    let peak = cfg.peak_lr();
    let warm = cfg.warmup_steps();
    if step < warm {
        return Ok(peak * (step + 1) as f64 / warm as f64);
    }
    let t = (step - warm) as f64;
    let span = (total - warm) as f64;
    Ok(peak * 0.5 * (1.0 + (PI * t / span).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(batch: usize, warmup: usize, epochs: usize, steps: usize) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: 0.1,
            batch_size: batch,
            warmup_epochs: warmup,
            total_epochs: epochs,
            steps_per_epoch: steps,
        }
    }

    #[test]
    fn first_warmup_tick() {
        let c = cfg(256, 5, 10, 100);
        assert!((lr_at(0, &c).unwrap() - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn large_batch_peak() {
        let c = cfg(8192, 5, 270, 10);
        assert_eq!(lr_at(c.warmup_steps() - 1, &c).unwrap(), 3.2);
        assert_eq!(lr_at(c.warmup_steps(), &c).unwrap(), 3.2);
    }

    #[test]
    fn cosine_endpoint_and_range() {
        let c = cfg(256, 1, 101, 100);
        let last = lr_at(c.total_steps() - 1, &c).unwrap();
        assert!(last > 0.0 && last < 0.1 * 1e-3);
        assert!(lr_at(c.total_steps(), &c).is_err());
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        let c = cfg(512, 0, 3, 4);
        assert_eq!(lr_at(0, &c).unwrap(), 0.2);
    }

    #[test]
    fn warmup_must_be_shorter_than_training() {
        assert!(cfg(256, 5, 5, 10).validate().is_err());
    }
}
