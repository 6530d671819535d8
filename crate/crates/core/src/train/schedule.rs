//! Linear warm-up followed by cosine annealing to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub epochs: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "need warmup_epochs ({}) < epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0 && self.warmup_lr >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`. Warm-up interpolates linearly from
/// `warmup_lr` to `base_lr`; afterwards
/// `lr = ½·base_lr·(1 + cos(π·t/T))` with `t = epoch − warmup_epochs` and
/// `T = epochs − warmup_epochs`. `epoch == epochs` is the schedule's end
/// point (lr 0).
pub fn lr_at(epoch: usize, s: &Schedule) -> Result<f64> {
    s.validate()?;
    if epoch > s.epochs {
        return Err(Error::Config(format!("epoch {epoch} outside 0..={}", s.epochs)));
    }
    if epoch < s.warmup_epochs {
        let f = epoch as f64 / s.warmup_epochs as f64;
        return Ok(s.warmup_lr + (s.base_lr - s.warmup_lr) * f);
    }
    let t = (epoch - s.warmup_epochs) as f64;
    let big_t = (s.epochs - s.warmup_epochs) as f64;
    Ok(0.5 * s.base_lr * (1.0 + (std::f64::consts::PI * t / big_t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> Schedule {
        Schedule {
            base_lr: 1e-4,
            warmup_epochs: 5,
            warmup_lr: 1e-6,
            epochs: 15,
        }
    }

    #[test]
    fn endpoints_and_midpoint() {
        let s = sched();
        assert_eq!(lr_at(0, &s).unwrap(), 1e-6);
        assert_eq!(lr_at(5, &s).unwrap(), 1e-4);
        assert!(lr_at(15, &s).unwrap().abs() < 1e-20);
        assert!((lr_at(10, &s).unwrap() - 5e-5).abs() < 1e-12);
        assert!(lr_at(16, &s).is_err());
    }

    #[test]
    fn continuous_at_junction_and_monotone() {
        let s = sched();
        let before = s.warmup_lr + (s.base_lr - s.warmup_lr) * 5.0 / 5.0;
        assert!((before - lr_at(5, &s).unwrap()).abs() < 1e-18);
        for e in 0..5 {
            assert!(lr_at(e, &s).unwrap() < lr_at(e + 1, &s).unwrap());
        }
        for e in 5..15 {
            assert!(lr_at(e, &s).unwrap() > lr_at(e + 1, &s).unwrap());
        }
    }

    #[test]
    fn invalid_schedules() {
        let mut s = sched();
        s.warmup_epochs = 15;
        assert!(lr_at(0, &s).is_err());
        let s = Schedule { warmup_epochs: 0, ..sched() };
        assert_eq!(lr_at(0, &s).unwrap(), 1e-4);
    }
}
