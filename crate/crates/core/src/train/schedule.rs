use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-constant learning rate: `base_lr · decay_factor^⌊epoch / step_epochs⌋`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub step_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: 0.005,
            decay_factor: 0.1,
            step_epochs: 10,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::contract("base learning rate must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::contract("decay factor must lie in (0, 1)"));
        }
        if self.step_epochs == 0 {
            return Err(Error::contract("step_epochs must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.step_epochs) as i32;
        self.base_lr * self.decay_factor.powi(steps)
    }
}

/// Minibatch iteration budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub iterations: usize,
    pub batch_size: usize,
}

impl Budget {
    /// 2000 iterations of 100 samples.
    pub const FULL: Budget = Budget {
        iterations: 2000,
        batch_size: 100,
    };

    /// Desk-scale preset for a training set of `train_len` samples: a batch
    /// of a quarter of the set (between 2 and 32) for 20 epochs.
    pub fn desk(train_len: usize) -> Budget {
        let batch_size = (train_len / 4).clamp(2, 32);
        let epochs_equiv = 20;
        let per_epoch = train_len.div_ceil(batch_size);
        Budget {
            iterations: (epochs_equiv * per_epoch).max(1),
            batch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_schedule_points() {
        let s = Schedule::default();
        assert_eq!(s.lr_at(0), 0.005);
        assert_eq!(s.lr_at(9), 0.005);
        assert!((s.lr_at(10) - 0.0005).abs() < 1e-18);
        assert!((s.lr_at(25) - 0.005 * 0.1 * 0.1).abs() < 1e-18);
    }

    #[test]
    fn non_increasing_with_exact_step_ratio() {
        let s = Schedule::default();
        for e in 0..100 {
            assert!(s.lr_at(e + 1) <= s.lr_at(e));
            if (e + 1) % 10 == 0 {
                assert_eq!(
                    s.lr_at(e + 1),
                    s.base_lr * s.decay_factor.powi((e as i32 + 1) / 10)
                );
            }
        }
    }

    #[test]
    fn invalid_schedules() {
        let bad = Schedule {
            decay_factor: 1.0,
            ..Schedule::default()
        };
        assert!(bad.validate().is_err());
        let bad = Schedule {
            base_lr: 0.0,
            ..Schedule::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn desk_budget_is_positive() {
        let b = Budget::desk(180);
        assert_eq!(b.batch_size, 32);
        assert_eq!(b.iterations, 20 * 6);
        let b = Budget::desk(3);
        assert_eq!(b.batch_size, 2);
    }
}
