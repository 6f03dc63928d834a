//! Round structure and optimization hyperparameters.

use serde::{Deserialize, Serialize};

use super::lr::PolySchedule;
use super::weights::{Strategy, TASKS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundPlan {
    pub rounds: usize,
    pub seg_iters: usize,
    pub fusion_iters: usize,
    pub batch_size: usize,
    pub seg_lr: PolySchedule,
    pub fusion_lr: PolySchedule,
    /// Leading segmentation steps run at exactly `warmup_lr`.
    pub warmup_iters: usize,
    pub warmup_lr: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for RoundPlan {
    fn default() -> Self {
        Self {
            rounds: 8,
            seg_iters: 10_000,
            fusion_iters: 5_000,
            batch_size: 8,
            seg_lr: PolySchedule {
                start: 8e-5,
                ..PolySchedule::default()
            },
            fusion_lr: PolySchedule::default(),
            warmup_iters: 3_000,
            warmup_lr: 1e-6,
            clip_norm: 5.0,
        }
    }
}

impl RoundPlan {
    /// Scaled-down profile: iteration counts divided by 25, two rounds.
    pub fn desk() -> Self {
        let full = Self::default();
        Self {
            rounds: 2,
            seg_iters: full.seg_iters / 25,
            fusion_iters: full.fusion_iters / 25,
            warmup_iters: full.warmup_iters / 25,
            batch_size: 1,
            seg_lr: PolySchedule {
                start: 1e-3,
                ..full.seg_lr
            },
            fusion_lr: PolySchedule {
                start: 4e-3,
                ..full.fusion_lr
            },
            ..full
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.batch_size == 0 {
            return Err(Error::config("rounds and batch_size must be positive"));
        }
        if self.seg_iters == 0 && self.fusion_iters == 0 {
            return Err(Error::config("a round needs at least one iteration"));
        }
        self.seg_lr.validate()?;
        self.fusion_lr.validate()?;
        if !(self.warmup_lr.is_finite() && self.warmup_lr >= 0.0) {
            return Err(Error::config("warmup_lr must be finite and non-negative"));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::config("clip_norm must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn total_seg_steps(&self) -> u64 {
        (self.rounds * self.seg_iters) as u64
    }

    pub fn total_fusion_steps(&self) -> u64 {
        (self.rounds * self.fusion_iters) as u64
    }

    /// Learning rate of the `step`-th segmentation update (0-based, global).
    pub fn seg_lr_at(&self, step: u64) -> Result<f64> {
        let warm = self.warmup_iters as u64;
        if step < warm {
            return Ok(self.warmup_lr);
        }
        let total = self.total_seg_steps().saturating_sub(warm);
        self.seg_lr.at((step - warm).min(total), total)
    }

    pub fn fusion_lr_at(&self, step: u64) -> Result<f64> {
        let total = self.total_fusion_steps();
        self.fusion_lr.at(step.min(total), total)
    }

    pub fn clip(&self) -> Option<f64> {
        (self.clip_norm > 0.0).then_some(self.clip_norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightingConfig {
    pub strategy: Strategy,
    pub temperature: f64,
    pub eta_pref: Vec<f64>,
    /// Fusion-phase iterations per weighting epoch; 0 makes each fusion
    /// phase one epoch.
    pub epoch_iters: usize,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Dynamic,
            temperature: 2.0,
            eta_pref: vec![1.0; TASKS],
            epoch_iters: 0,
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.eta_pref.len() != TASKS || self.eta_pref.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::config(format!("eta_pref needs {TASKS} positive values")));
        }
        if let Strategy::Manual(v) = &self.strategy {
            if v.len() != TASKS {
                return Err(Error::config(format!("manual weighting needs {TASKS} values")));
            }
        }
        Ok(())
    }
}
