//! SGD with momentum and reduce-on-plateau learning-rate scheduling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One momentum step: `v <- momentum * v - lr * g; p <- p + v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!(
                "params {}, grads {}, velocity {}",
                params.len(),
                grads.len(),
                velocity.len()
            ),
        ));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Quantity watched by the plateau scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValidationLoss,
    ValidationAccuracy,
}

/// Strict improvement threshold over the best value seen so far.
pub const MIN_IMPROVEMENT: f64 = 1e-9;

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without strict improvement; the counter resets on improvement and
/// after each reduction.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    monitor: Monitor,
    best: Option<f64>,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, factor: f64, patience: usize, monitor: Monitor) -> Result<Self> {
        if !(lr0 > 0.0) || !(factor > 0.0 && factor < 1.0) || patience == 0 {
            return Err(Error::Config(format!(
                "plateau scheduler needs lr0 > 0, factor in (0,1), patience >= 1 \
                 (got {lr0}, {factor}, {patience})"
            )));
        }
        Ok(PlateauScheduler {
            lr: lr0,
            factor,
            patience,
            monitor,
            best: None,
            wait: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's monitored value and returns the rate for the next epoch.
    pub fn observe(&mut self, value: f64) -> f64 {
        let improved = match (self.best, self.monitor) {
            (None, _) => true,
            (Some(best), Monitor::ValidationLoss) => value < best - MIN_IMPROVEMENT,
            (Some(best), Monitor::ValidationAccuracy) => value > best + MIN_IMPROVEMENT,
        };
        if improved {
            self.best = Some(value);
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr *= self.factor;
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// Learning rate used in each epoch for a sequence of validation losses.
///
/// Entry `i` is the rate in effect during epoch `i + 1`; the first epoch
/// always runs at `lr0`.
pub fn plateau_schedule(losses: &[f64], factor: f64, patience: usize, lr0: f64) -> Result<Vec<f64>> {
    let mut sched = PlateauScheduler::new(lr0, factor, patience, Monitor::ValidationLoss)?;
    let mut out = Vec::with_capacity(losses.len());
    let mut current = lr0;
    for &loss in losses {
        out.push(current);
        current = sched.observe(loss);
    }
    Ok(out)
}

/// Per-tensor velocity buffers for a list of layers.
#[derive(Debug, Clone)]
pub struct MomentumState {
    pub velocity: Vec<Vec<Vec<f64>>>,
}

impl MomentumState {
    pub fn zeros_like(shapes: &[Vec<usize>]) -> Self {
        MomentumState {
            velocity: shapes.iter().map(|s| s.iter().map(|&n| vec![0.0; n]).collect()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_momentum_step(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.05, -2.0 + 0.1]);
    }

    #[test]
    fn two_steps_constant_gradient() {
        let (lr, m, g) = (0.01, 0.9, 2.0);
        let mut p = vec![3.0];
        let mut v = vec![0.0];
        sgd_momentum_step(&mut p, &[g], &mut v, lr, m).unwrap();
        sgd_momentum_step(&mut p, &[g], &mut v, lr, m).unwrap();
        let expected = 3.0 - lr * g * (1.0 + (1.0 + m));
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lengths() {
        let mut p = vec![0.0; 2];
        let mut v = vec![0.0; 3];
        assert!(sgd_momentum_step(&mut p, &[0.0; 2], &mut v, 0.1, 0.9).is_err());
    }

    #[test]
    fn accuracy_monitor_needs_increase() {
        let mut s = PlateauScheduler::new(1.0, 0.5, 2, Monitor::ValidationAccuracy).unwrap();
        assert_eq!(s.observe(0.5), 1.0);
        assert_eq!(s.observe(0.6), 1.0);
        assert_eq!(s.observe(0.6), 1.0);
        assert_eq!(s.observe(0.55), 0.5);
    }

    #[test]
    fn invalid_scheduler_config() {
        assert!(PlateauScheduler::new(0.001, 1.0, 3, Monitor::ValidationLoss).is_err());
        assert!(PlateauScheduler::new(0.001, 0.5, 0, Monitor::ValidationLoss).is_err());
    }
}
