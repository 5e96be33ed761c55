//! Learning-rate schedules: linear warmup into cosine decay, and the
//! milestone-stepped variant.

use crate::error::{CoreError, Result};
use crate::math;
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    CosineWarmup,
    MultiStep,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::CosineWarmup => "cosine_warmup",
            ScheduleKind::MultiStep => "multi_step",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine_warmup" | "cosine" => Ok(ScheduleKind::CosineWarmup),
            "multi_step" => Ok(ScheduleKind::MultiStep),
            other => Err(CoreError::Config {
                field: "schedule".to_string(),
                message: format!("unknown schedule kind `{other}`"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub warmup_steps: usize,
    pub warmup_init_lr: f64,
    pub max_lr: f64,
    pub min_lr: f64,
    /// Epoch indices at which multi_step scales the rate by gamma.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    /// Maps steps onto epochs for milestone schedules.
    pub steps_per_epoch: usize,
}

impl Default for Schedule {
    /// Pretraining defaults: cosine with 1000 warmup steps from 1e-6 up to
    /// 3e-5, decaying back to 1e-6.
    fn default() -> Self {
        Schedule {
            kind: ScheduleKind::CosineWarmup,
            warmup_steps: 1000,
            warmup_init_lr: 1e-6,
            max_lr: 3e-5,
            min_lr: 1e-6,
            milestones: Vec::new(),
            gamma: 0.1,
            steps_per_epoch: 1,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_init_lr > self.max_lr {
            return Err(CoreError::Config {
                field: "warmup_init_lr".to_string(),
                message: format!("{} exceeds max_lr {}", self.warmup_init_lr, self.max_lr),
            });
        }
        if self.min_lr > self.max_lr {
            return Err(CoreError::Config {
                field: "min_lr".to_string(),
                message: format!("{} exceeds max_lr {}", self.min_lr, self.max_lr),
            });
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::Config {
                field: "milestones".to_string(),
                message: "must be strictly increasing".to_string(),
            });
        }
        if self.steps_per_epoch == 0 {
            return Err(CoreError::Config {
                field: "steps_per_epoch".to_string(),
                message: "must be positive".to_string(),
            });
        }
        Ok(())
    }

    /// Learning rate at `step` of a run `total_steps` long.
    pub fn lr_at_step(&self, step: usize, total_steps: usize) -> Result<f64> {
        if step > total_steps {
            return Err(CoreError::BadArgument {
                op: "lr_at_step",
                message: format!("step {step} beyond total {total_steps}"),
            });
        }
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return Ok(self.warmup_init_lr + (self.max_lr - self.warmup_init_lr) * t);
        }
        match self.kind {
            ScheduleKind::CosineWarmup => {
                let span = total_steps.saturating_sub(self.warmup_steps);
                if span == 0 {
                    return Ok(self.max_lr);
                }
                let progress = (step - self.warmup_steps) as f64 / span as f64;
                Ok(self.min_lr
                    + 0.5 * (self.max_lr - self.min_lr) * (1.0 + math::cos(math::PI * progress)))
            }
            ScheduleKind::MultiStep => {
                let epoch = step / self.steps_per_epoch;
                let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
                Ok(self.max_lr * math::powf(self.gamma, passed as f64))
            }
        }
    }
}
