//! Learning-rate schedules. Epochs are 1-based, steps 0-based.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rounds to 12 significant digits, so that products such as `5e-6 * 0.1`
/// land exactly on the decimal literal instead of one ulp away.
pub fn snap(lr: f64) -> f64 {
    if lr == 0.0 || !lr.is_finite() {
        return lr;
    }
    let scale = 10f64.powi(11 - lr.abs().log10().floor() as i32);
    (lr * scale).round() / scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Half-cosine from `base` at step 0 towards `min` at `total_steps`.
    Cosine { base: f64, min: f64, total_steps: usize },
    /// Linear warmup over epochs `1..=warmup_epochs` from `start` to `peak`,
    /// then `peak · gamma^k` where `k` counts milestones `≤ epoch`.
    WarmupStep {
        start: f64,
        peak: f64,
        warmup_epochs: usize,
        milestones: Vec<usize>,
        gamma: f64,
    },
}

impl LrSchedule {
    pub fn stage1_default(total_steps: usize) -> Self {
        LrSchedule::Cosine {
            base: 3.5e-4,
            min: 0.0,
            total_steps,
        }
    }

    pub fn stage2_default() -> Self {
        LrSchedule::WarmupStep {
            start: 5e-7,
            peak: 5e-6,
            warmup_epochs: 10,
            milestones: vec![30, 50],
            gamma: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Cosine { base, min, total_steps } => {
                if !(*base > 0.0 && *min >= 0.0 && min <= base && *total_steps > 0) {
                    return Err(Error::config("cosine schedule needs base > 0, 0 <= min <= base, total_steps > 0"));
                }
            }
            LrSchedule::WarmupStep {
                start,
                peak,
                milestones,
                gamma,
                warmup_epochs,
            } => {
                if !(*start > 0.0 && *peak > 0.0 && *gamma > 0.0) {
                    return Err(Error::config("warmup schedule rates must be positive"));
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config("milestones must be strictly increasing"));
                }
                if milestones.first().is_some_and(|&m| m <= *warmup_epochs) {
                    return Err(Error::config("milestones must fall after the warmup"));
                }
            }
        }
        Ok(())
    }

    /// Rate used for every step of `epoch` (1-based) or at global `step`.
    pub fn lr(&self, epoch: usize, step: usize) -> f64 {
        let raw = match self {
            LrSchedule::Cosine { base, min, total_steps } => {
                let t = (step.min(*total_steps) as f64) / (*total_steps as f64);
                min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::WarmupStep {
                start,
                peak,
                warmup_epochs,
                milestones,
                gamma,
            } => {
                let e = epoch.max(1);
                if e <= *warmup_epochs {
                    if *warmup_epochs == 1 {
                        *peak
                    } else {
                        start + (peak - start) * (e - 1) as f64 / (*warmup_epochs - 1) as f64
                    }
                } else {
                    let k = milestones.iter().filter(|&&m| m <= e).count();
                    peak * gamma.powi(k as i32)
                }
            }
        };
        snap(raw)
    }
}
