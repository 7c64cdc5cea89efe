//! Learning-rate schedules.

use crate::error::{Error, Result};

/// Loss-driven schedule: two /10 drops at `floor(T/3)` and `floor(2T/3)`, plus
/// a multiplicative adjustment every `cadence` epochs from `start_epoch` on,
/// shrinking when the short-window loss mean exceeds the long-window mean and
/// growing otherwise. Growth is not capped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicTuning {
    pub drop_factor: f64,
    pub short_window: usize,
    pub long_window: usize,
    pub shrink: f64,
    pub grow: f64,
    pub start_epoch: usize,
    pub cadence: usize,
}

impl Default for DynamicTuning {
    fn default() -> Self {
        DynamicTuning {
            drop_factor: 10.0,
            short_window: 5,
            long_window: 10,
            shrink: 0.7,
            grow: 1.06,
            start_epoch: 20,
            cadence: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// `eta0 * factor^floor(epoch / period)`.
    StepDecay {
        factor: f64,
        period: usize,
    },
    DynamicTuning(DynamicTuning),
    /// `c / sqrt(T)` for the whole run; `eta0` is ignored.
    InvSqrt {
        c: f64,
    },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("schedule {name} must be positive, got {v}")))
            }
        };
        match *self {
            Schedule::Constant => Ok(()),
            Schedule::StepDecay { factor, period } => {
                positive("factor", factor)?;
                if period == 0 {
                    return Err(Error::Config("schedule period must be at least 1".into()));
                }
                Ok(())
            }
            Schedule::DynamicTuning(d) => {
                positive("drop_factor", d.drop_factor)?;
                positive("shrink", d.shrink)?;
                positive("grow", d.grow)?;
                if d.short_window == 0 || d.long_window < d.short_window || d.cadence == 0 {
                    return Err(Error::Config("dynamic tuning windows/cadence are inconsistent".into()));
                }
                Ok(())
            }
            Schedule::InvSqrt { c } => positive("c", c),
        }
    }
}

/// Stateful learning-rate tracker for one run of `epochs` epochs.
#[derive(Debug, Clone)]
pub struct LrTracker {
    schedule: Schedule,
    eta0: f64,
    epochs: usize,
    next_epoch: usize,
    current: f64,
}

impl LrTracker {
    pub fn new(schedule: Schedule, eta0: f64, epochs: usize) -> Result<Self> {
        schedule.validate()?;
        Ok(LrTracker { schedule, eta0, epochs, next_epoch: 0, current: eta0 })
    }

    /// Learning rate for `epoch`, given one loss per completed epoch. Epochs
    /// must be requested in order starting at 0.
    pub fn lr_for_epoch(&mut self, epoch: usize, history: &[f64]) -> Result<f64> {
        if epoch != self.next_epoch {
            return Err(Error::Precondition(format!("expected epoch {}, got {epoch}", self.next_epoch)));
        }
        if history.len() < epoch {
            return Err(Error::Precondition(format!(
                "epoch {epoch} needs {epoch} recorded losses, got {}",
                history.len()
            )));
        }
        self.next_epoch += 1;
        let t = self.epochs;
        self.current = match self.schedule {
            Schedule::Constant => self.eta0,
            Schedule::StepDecay { factor, period } => self.eta0 * factor.powi((epoch / period) as i32),
            Schedule::InvSqrt { c } => c / (t as f64).sqrt(),
            Schedule::DynamicTuning(d) => {
                if epoch == 0 {
                    self.eta0
                } else {
                    let mut lr = self.current;
                    for drop_at in [t / 3, 2 * t / 3] {
                        if epoch == drop_at {
                            lr /= d.drop_factor;
                        }
                    }
                    let due = epoch >= d.start_epoch && (epoch - d.start_epoch).is_multiple_of(d.cadence);
                    if due && epoch >= d.long_window {
                        let done = &history[..epoch];
                        let short = mean(&done[epoch - d.short_window..]);
                        let long = mean(&done[epoch - d.long_window..]);
                        lr *= if short > long { d.shrink } else { d.grow };
                    }
                    lr
                }
            }
        };
        Ok(self.current)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Learning rate at `epoch` of an `epochs`-long run, replaying the schedule
/// from epoch 0 over `loss_history` (one entry per completed epoch).
pub fn schedule_lr(schedule: &Schedule, eta0: f64, epochs: usize, epoch: usize, loss_history: &[f64]) -> Result<f64> {
    let mut tracker = LrTracker::new(*schedule, eta0, epochs)?;
    let mut lr = eta0;
    for e in 0..=epoch {
        lr = tracker.lr_for_epoch(e, loss_history)?;
    }
    Ok(lr)
}
