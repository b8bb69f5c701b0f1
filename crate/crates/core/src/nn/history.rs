use std::io::Write;

use serde::{Deserialize, Serialize};

use super::optim::Monitor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub monitor: Monitor,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.001,
            momentum: 0.9,
            plateau_factor: 0.5,
            plateau_patience: 3,
            monitor: Monitor::ValidationLoss,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".to_string());
        }
        if !(self.learning_rate > 0.0) {
            problems.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            problems.push(format!(
                "plateau_factor must lie in (0, 1), got {}",
                self.plateau_factor
            ));
        }
        if self.plateau_patience == 0 {
            problems.push("plateau_patience must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainHistory {
    /// Validation loss/accuracy before the first update.
    pub initial_val_loss: f64,
    pub initial_val_acc: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::Format(format!("history csv: {e}"));
        w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr"])
            .map_err(err)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.train_acc.to_string(),
                e.val_loss.to_string(),
                e.val_acc.to_string(),
                e.lr.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::Format(format!("history csv: {e}")))
    }

    pub fn final_val_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_acc)
    }
}
