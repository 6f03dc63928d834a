//! Learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_POWER: f64 = 0.9;

/// `lr_end + (lr_start − lr_end)·(1 − step/total)^power`.
pub fn poly_lr(step: u64, total_steps: u64, lr_start: f64, lr_end: f64, power: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::config(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(lr_start);
    }
    let frac = 1.0 - step as f64 / total_steps as f64;
    Ok(lr_end + (lr_start - lr_end) * frac.powf(power))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolySchedule {
    pub start: f64,
    pub end: f64,
    pub power: f64,
}

impl Default for PolySchedule {
    fn default() -> Self {
        Self {
            start: 1e-4,
            end: 1e-8,
            power: DEFAULT_POWER,
        }
    }
}

impl PolySchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.start) && ok(self.end) && ok(self.power) && self.start > 0.0) {
            return Err(Error::config(format!("invalid poly schedule {self:?}")));
        }
        Ok(())
    }

    pub fn at(&self, step: u64, total: u64) -> Result<f64> {
        poly_lr(step, total, self.start, self.end, self.power)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(poly_lr(0, 100, 1e-4, 1e-8, 0.9).unwrap(), 1e-4);
        assert_eq!(poly_lr(100, 100, 1e-4, 1e-8, 0.9).unwrap(), 1e-8);
    }

    #[test]
    fn midpoint() {
        let v = poly_lr(50, 100, 1e-4, 1e-8, 0.9).unwrap();
        let expect = 1e-8 + (1e-4 - 1e-8) * 0.5f64.powf(0.9);
        assert!((v - expect).abs() < 1e-20);
        // 5.3589e-5 to the four significant digits it is usually quoted with
        assert!(((v - 5.3589e-5) / 5.3589e-5).abs() < 1e-4);
    }

    #[test]
    fn out_of_range() {
        assert!(matches!(poly_lr(101, 100, 1e-4, 1e-8, 0.9), Err(Error::Config(_))));
    }

    #[test]
    fn monotone_decay() {
        let s = PolySchedule::default();
        let mut prev = f64::INFINITY;
        for i in 0..=20 {
            let v = s.at(i, 20).unwrap();
            assert!(v <= prev);
            prev = v;
        }
    }
}
