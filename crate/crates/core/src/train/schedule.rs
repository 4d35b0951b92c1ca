use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warm-up from `init_lr` to `base_lr`, then cosine annealing back
/// to `init_lr` at the final step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub init_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "step {step} beyond schedule of {} steps",
                self.total_steps
            )));
        }
        let warmup = self.warmup_steps.min(self.total_steps);
        let span = self.base_lr - self.init_lr;
        if step < warmup {
            return Ok(self.init_lr + span * step as f64 / warmup as f64);
        }
        let decay = self.total_steps - warmup;
        if decay == 0 {
            return Ok(self.base_lr);
        }
        let progress = (step - warmup) as f64 / decay as f64;
        Ok(self.init_lr + 0.5 * span * (1.0 + (PI * progress).cos()))
    }
}
