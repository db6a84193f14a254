use serde::{Deserialize, Serialize};

/// Linear warmup to `base`, then linear decay to zero at `total` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LrSchedule {
    /// Learning rate for 1-based update `step`; step 0 is treated as step 1.
    pub fn lr(&self, step: u64) -> f64 {
        let s = step.max(1);
        if s <= self.warmup {
            return self.base * s as f64 / self.warmup as f64;
        }
        if s >= self.total {
            return 0.0;
        }
        let span = (self.total - self.warmup) as f64;
        self.base * (self.total - s) as f64 / span
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCHED: LrSchedule = LrSchedule {
        base: 1e-4,
        warmup: 10_000,
        total: 100_000,
    };

    #[test]
    fn warmup_points() {
        assert_eq!(SCHED.lr(0), 1e-8);
        assert_eq!(SCHED.lr(1), 1e-8);
        assert!((SCHED.lr(5_000) - 0.5e-4).abs() < 1e-18);
        assert_eq!(SCHED.lr(10_000), 1e-4);
    }

    #[test]
    fn decays_to_zero() {
        assert!((SCHED.lr(55_000) - 0.5e-4).abs() < 1e-18);
        assert_eq!(SCHED.lr(100_000), 0.0);
        assert_eq!(SCHED.lr(200_000), 0.0);
    }

    #[test]
    fn no_warmup() {
        let s = LrSchedule { base: 2.0, warmup: 0, total: 4 };
        assert_eq!(s.lr(1), 1.5);
        assert_eq!(s.lr(3), 0.5);
    }
}
