use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from 0 to `peak`, constant until `plateau_end`, then
/// `peak / sqrt(1 + c (t - plateau_end))` with `c` chosen so the rate reaches
/// `floor` exactly at `decay_end`, constant `floor` afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub warmup: usize,
    pub peak: f64,
    pub plateau_end: usize,
    pub decay_end: usize,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            warmup: 1000,
            peak: 2.5e-4,
            plateau_end: 10_000,
            decay_end: 15_000,
            floor: 1e-5,
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            warmup: 0,
            peak: lr,
            plateau_end: 0,
            decay_end: 0,
            floor: lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup <= self.plateau_end && self.plateau_end <= self.decay_end) {
            return Err(Error::Config(format!(
                "schedule breakpoints must satisfy warmup <= plateau_end <= decay_end, got {} / {} / {}",
                self.warmup, self.plateau_end, self.decay_end
            )));
        }
        if !(self.peak > 0.0 && self.floor > 0.0 && self.floor <= self.peak) {
            return Err(Error::Config("schedule needs 0 < floor <= peak".into()));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if step <= self.plateau_end {
            return self.peak;
        }
        if step >= self.decay_end {
            return self.floor;
        }
        let span = (self.decay_end - self.plateau_end) as f64;
        let c = ((self.peak / self.floor).powi(2) - 1.0) / span;
        self.peak / (1.0 + c * (step - self.plateau_end) as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn breakpoints() {
        let s = LrSchedule::default();
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(500) - 1.25e-4).abs() < 1e-15);
        assert_eq!(s.lr(1000), 2.5e-4);
        assert_eq!(s.lr(10_000), 2.5e-4);
        assert!((s.lr(14_999) - 1e-5).abs() < 1e-8);
        assert_eq!(s.lr(15_000), 1e-5);
        assert_eq!(s.lr(1_000_000), 1e-5);
        // inverse-sqrt decay lies above the straight line between the ends
        let mid = s.lr(12_500);
        assert!(mid < 2.5e-4 && mid > 1e-5);
    }

    #[test]
    fn non_monotone_breakpoints_rejected() {
        let s = LrSchedule {
            plateau_end: 500,
            ..LrSchedule::default()
        };
        assert!(s.validate().is_err());
        assert!(LrSchedule::default().validate().is_ok());
        assert!(LrSchedule::constant(1e-3).validate().is_ok());
        assert_eq!(LrSchedule::constant(1e-3).lr(0), 1e-3);
    }

    proptest! {
        #[test]
        fn non_increasing_after_warmup(a in 1000usize..20_000, b in 1000usize..20_000) {
            let s = LrSchedule::default();
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(s.lr(hi) <= s.lr(lo));
        }
    }
}
