//! Maximum-likelihood pretraining and the alternating adversarial schedule.

mod gan;
mod log;
mod pretrain;
mod schedule;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::AdamConfig;

pub use gan::{derangement, GanTrainer};
pub use log::{LogRecord, TrainLog};
pub use pretrain::{pretrain_discriminator, pretrain_generator, DiscPretrainSummary, GenPretrainSummary};
pub use schedule::{run_schedule, Adversary, DStep, GStep, ScheduleSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Images per adversarial batch; captions per generator-pretraining batch.
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub disc_pretrain_epochs: usize,
    pub disc_pretrain_learning_rate: f64,
    /// Discriminator updates per generator update.
    pub n_d: usize,
    /// Probe accuracy below which generator updates pause.
    pub acc_gate: f64,
    /// Updates (of either network) between accuracy probes.
    pub monitor_every: usize,
    /// Most discriminator updates one gate activation may spend recovering.
    pub gate_recovery_cap: usize,
    /// Held-out images scored by each probe.
    pub probe_images: usize,
    /// Generator updates in the adversarial phase.
    pub gan_iterations: usize,
    pub d_learning_rate: f64,
    pub g_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    pub feature_matching: bool,
    /// Record elapsed milliseconds in the log (makes logs run-dependent).
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            pretrain_epochs: 8,
            pretrain_learning_rate: 2e-3,
            disc_pretrain_epochs: 5,
            disc_pretrain_learning_rate: 3e-3,
            n_d: 5,
            acc_gate: 0.75,
            monitor_every: 25,
            gate_recovery_cap: 200,
            probe_images: 32,
            gan_iterations: 150,
            d_learning_rate: 2e-4,
            g_learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            clip_norm: 5.0,
            feature_matching: true,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_d == 0 {
            return Err(Error::Config("n_d must be ≥ 1".into()));
        }
        if !(self.acc_gate > 0.5 && self.acc_gate < 1.0) {
            return Err(Error::Config(format!("acc_gate must lie in (0.5, 1), got {}", self.acc_gate)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be ≥ 2 so mismatched sets exist".into()));
        }
        if self.monitor_every == 0 || self.probe_images < 2 {
            return Err(Error::Config("monitor_every must be ≥ 1 and probe_images ≥ 2".into()));
        }
        for (name, lr) in [
            ("pretrain_learning_rate", self.pretrain_learning_rate),
            ("disc_pretrain_learning_rate", self.disc_pretrain_learning_rate),
            ("d_learning_rate", self.d_learning_rate),
            ("g_learning_rate", self.g_learning_rate),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be a positive number, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig {
            learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: 1e-8,
            clip_norm: self.clip_norm,
        }
    }
}
