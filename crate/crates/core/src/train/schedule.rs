use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PEAK_LR: f64 = 4e-4;
pub const DEFAULT_WARMUP_FRAC: f64 = 0.05;
pub const DEFAULT_FINAL_LR_FRAC: f64 = 0.1;

/// Linear warmup from 0 to `peak_lr`, then cosine decay to
/// `final_lr_frac * peak_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    peak_lr: f64,
    warmup_frac: f64,
    final_lr_frac: f64,
    total_steps: usize,
}

impl Schedule {
    pub fn new(
        peak_lr: f64,
        warmup_frac: f64,
        final_lr_frac: f64,
        total_steps: usize,
    ) -> Result<Self> {
        if !(peak_lr > 0.0 && peak_lr.is_finite()) {
            return Err(Error::Parameter(format!(
                "peak_lr must be positive, got {peak_lr}"
            )));
        }
        if !(warmup_frac > 0.0 && warmup_frac < 1.0) {
            return Err(Error::Parameter(format!(
                "warmup_frac must lie in (0, 1), got {warmup_frac}"
            )));
        }
        if !(final_lr_frac > 0.0 && final_lr_frac <= 1.0) {
            return Err(Error::Parameter(format!(
                "final_lr_frac must lie in (0, 1], got {final_lr_frac}"
            )));
        }
        if total_steps < 2 {
            return Err(Error::Parameter("schedule needs at least 2 steps".into()));
        }
        Ok(Schedule {
            peak_lr,
            warmup_frac,
            final_lr_frac,
            total_steps,
        })
    }

    /// 4e-4 peak, 5% warmup, decay to 10% of peak.
    pub fn with_defaults(total_steps: usize) -> Result<Self> {
        Self::new(
            DEFAULT_PEAK_LR,
            DEFAULT_WARMUP_FRAC,
            DEFAULT_FINAL_LR_FRAC,
            total_steps,
        )
    }

    pub fn peak_lr(&self) -> f64 {
        self.peak_lr
    }
    pub fn warmup_frac(&self) -> f64 {
        self.warmup_frac
    }
    pub fn final_lr_frac(&self) -> f64 {
        self.final_lr_frac
    }
    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// Step at which the warmup ends and the learning rate peaks; always in
    /// `[1, total_steps - 1]`.
    pub fn warmup_end(&self) -> usize {
        ((self.warmup_frac * self.total_steps as f64).round() as usize)
            .clamp(1, self.total_steps - 1)
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Range(format!(
                "step {step} beyond schedule length {}",
                self.total_steps
            )));
        }
        let w = self.warmup_end();
        if step <= w {
            return Ok(self.peak_lr * (step as f64 / w as f64));
        }
        let progress = (step - w) as f64 / (self.total_steps - w) as f64;
        let floor = self.final_lr_frac * self.peak_lr;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Ok((floor + (self.peak_lr - floor) * cosine).min(self.peak_lr))
    }
}

/// Convenience wrapper matching the free-function form.
pub fn lr_at(step: usize, s: &Schedule) -> Result<f64> {
    s.lr_at(step)
}
