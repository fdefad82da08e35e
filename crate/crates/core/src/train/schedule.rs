//! Linear warm-up, cosine decay, then hold at the final rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub decay_steps: u64,
    pub final_lr: f64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    /// Tokenizer and image decoder: 200k steps, 2k warm-up, 150k decay.
    pub fn tokenizer() -> Self {
        Self {
            warmup_steps: 2_000,
            peak_lr: 5e-5,
            decay_steps: 150_000,
            final_lr: 5e-7,
            total_steps: 200_000,
        }
    }

    /// World model: 28.3k steps, 250 warm-up, 15k decay.
    pub fn world_model() -> Self {
        Self {
            warmup_steps: 250,
            peak_lr: 6e-4,
            decay_steps: 15_000,
            final_lr: 6e-5,
            total_steps: 28_300,
        }
    }

    /// Video decoder: 100k steps, 100 warm-up, decay over the remainder.
    pub fn video_decoder() -> Self {
        Self {
            warmup_steps: 100,
            peak_lr: 5e-5,
            decay_steps: 99_900,
            final_lr: 5e-7,
            total_steps: 100_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps + self.decay_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warm-up {} + decay {} exceeds total {} steps",
                self.warmup_steps, self.decay_steps, self.total_steps
            )));
        }
        if !(self.final_lr > 0.0) || !(self.peak_lr >= self.final_lr) || !self.peak_lr.is_finite() {
            return Err(Error::Config(format!(
                "need peak lr {} >= final lr {} > 0",
                self.peak_lr, self.final_lr
            )));
        }
        Ok(())
    }

    /// Step at which the cosine reaches the final rate.
    pub fn decay_end(&self) -> u64 {
        self.warmup_steps + self.decay_steps
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return self.peak_lr;
            }
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        if step <= self.decay_end() {
            let t = (step - self.warmup_steps) as f64 / self.decay_steps as f64;
            return self.final_lr + (self.peak_lr - self.final_lr) * 0.5 * (1.0 + (PI * t).cos());
        }
        self.final_lr
    }
}
