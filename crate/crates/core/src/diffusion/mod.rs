//! Desk-scale conditional denoising diffusion: noise schedule, forward
//! noising, training with an EMA shadow, ancestral sampling, label smoothing
//! and dataset augmentation.

mod augment;
mod checkpoint;
mod ddpm;
mod schedule;

pub use augment::{augment_partition, smooth_labels};
pub use checkpoint::{read_ddpm, read_ddpm_file, write_ddpm, write_ddpm_file};
pub use ddpm::{ddpm_loss, sample, time_embedding, train_ddpm, Ddpm, DdpmTrainConfig, TrainStats};
pub use schedule::{ddpm_epochs, forward_noise_closed, forward_noise_step, DiffusionSchedule};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every knob of a generator used for augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpmSettings {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub time_dim: usize,
    pub batch: usize,
    pub lr: f64,
    pub ema_decay: f64,
    /// Upper bound on training epochs; the epoch rule is applied below it.
    pub epoch_cap: usize,
}

impl Default for DdpmSettings {
    fn default() -> Self {
        DdpmSettings {
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.05,
            hidden: 128,
            time_dim: 16,
            batch: 64,
            lr: 1e-3,
            ema_decay: 0.995,
            epoch_cap: 2000,
        }
    }
}

impl DdpmSettings {
    pub fn validate(&self) -> Result<()> {
        self.schedule().map_err(|e| Error::config("ddpm.beta_start", e.to_string()))?;
        for (field, v) in [
            ("ddpm.hidden", self.hidden),
            ("ddpm.batch", self.batch),
            ("ddpm.epoch_cap", self.epoch_cap),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::config("ddpm.time_dim", "must be even"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ddpm.ema_decay", "must lie in [0, 1]"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("ddpm.lr", "must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    /// `(rule, used)`: the epoch rule's value and the capped count actually run.
    pub fn epochs_for(&self, classes: usize, samples: usize) -> (usize, usize) {
        let rule = ddpm_epochs(classes, samples);
        (rule, rule.min(self.epoch_cap))
    }

    pub fn train_config(&self, epochs: usize) -> DdpmTrainConfig {
        DdpmTrainConfig {
            epochs,
            batch: self.batch,
            lr: self.lr,
            ema_decay: self.ema_decay,
            hidden: self.hidden,
            time_dim: self.time_dim,
        }
    }
}
