//! Learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine annealing with warm restarts. Cycle `i` spans steps
/// `0..=period_i` of its own clock; the step after `period_i` starts the
/// next cycle at `eta_max` with `period_{i+1} = period_i * mult`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineSchedule {
    pub eta_max: f64,
    pub eta_min: f64,
    pub period: u64,
    #[serde(default = "default_mult")]
    pub mult: u64,
}

fn default_mult() -> u64 {
    1
}

impl CosineSchedule {
    pub fn new(eta_max: f64, eta_min: f64, period: u64, mult: u64) -> Result<Self> {
        let s = CosineSchedule { eta_max, eta_min, period, mult };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_min >= 0.0 && self.eta_min <= self.eta_max && self.eta_max.is_finite()) {
            return Err(Error::config(format!(
                "cosine schedule needs 0 <= eta_min <= eta_max, got {} and {}",
                self.eta_min, self.eta_max
            )));
        }
        if self.period == 0 || self.mult == 0 {
            return Err(Error::config("cosine period and restart multiplier must be at least 1"));
        }
        Ok(())
    }

    /// Position of step `t` as `(t_cur, period)` within its cycle.
    pub fn cycle_position(&self, t: u64) -> (u64, u64) {
        let mut t = t;
        let mut period = self.period;
        while t > period {
            t -= period + 1;
            period = period.saturating_mul(self.mult);
        }
        (t, period)
    }

    pub fn lr(&self, t: u64) -> f64 {
        cosine_lr(t, self)
    }
}

/// `eta_min + (eta_max - eta_min) (1 + cos(pi t_cur / T_i)) / 2`.
pub fn cosine_lr(t: u64, cfg: &CosineSchedule) -> f64 {
    let (cur, period) = cfg.cycle_position(t);
    if cur == 0 {
        return cfg.eta_max;
    }
    if cur == period {
        return cfg.eta_min;
    }
    let phase = std::f64::consts::PI * cur as f64 / period as f64;
    let lr = cfg.eta_min + 0.5 * (cfg.eta_max - cfg.eta_min) * (1.0 + phase.cos());
    lr.clamp(cfg.eta_min, cfg.eta_max)
}

/// Schedule choice of a training run. Steps count optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    #[default]
    Constant,
    /// Cosine annealing from the optimizer's learning rate down to `eta_min`.
    /// Without `period` a single cycle spans the whole run.
    Cosine {
        eta_min: f64,
        #[serde(default)]
        period: Option<u64>,
        #[serde(default = "default_mult")]
        mult: u64,
    },
}

impl ScheduleConfig {
    pub fn resolve(&self, base_lr: f64, total_steps: u64) -> Result<Option<CosineSchedule>> {
        match *self {
            ScheduleConfig::Constant => Ok(None),
            ScheduleConfig::Cosine { eta_min, period, mult } => {
                let period = period.unwrap_or(total_steps.saturating_sub(1).max(1));
                CosineSchedule::new(base_lr, eta_min, period, mult).map(Some)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = CosineSchedule::new(0.1, 1e-8, 10, 1).unwrap();
        assert_eq!(cosine_lr(0, &s), 0.1);
        assert_eq!(cosine_lr(10, &s), 1e-8);
        assert!((cosine_lr(5, &s) - (0.1 + 1e-8) / 2.0).abs() < 1e-15);
        assert_eq!(cosine_lr(11, &s), 0.1);
    }

    #[test]
    fn restart_multiplier_stretches_cycles() {
        let s = CosineSchedule::new(1.0, 0.0, 4, 2).unwrap();
        assert_eq!(s.cycle_position(4), (4, 4));
        assert_eq!(s.cycle_position(5), (0, 8));
        assert_eq!(s.cycle_position(13), (8, 8));
        assert_eq!(s.cycle_position(14), (0, 16));
    }

    #[test]
    fn rejects_inverted_range() {
        assert!(CosineSchedule::new(0.1, 0.2, 10, 1).is_err());
        assert!(CosineSchedule::new(0.1, 0.0, 0, 1).is_err());
    }
}
