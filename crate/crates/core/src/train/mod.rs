//! Self-supervised and supervised training of the cascade.

pub mod adam;
pub mod loss;
mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::Adam;
pub use loss::{ac_loss, pdc_loss, supervised_loss, total_loss, LossWeights, PdcNorm};
pub use trainer::{
    fit, log_to_csv, loss_and_grad, loss_value, validate, selfsup_train_step, write_log_csv, FitResult, LogRow, LossBreakdown, Partition,
    StepStats, TrainSample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMode {
    SelfsupDual,
    SelfsupImageOnly,
    SelfsupKspaceOnly,
    Supervised,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::SelfsupDual => "selfsup_dual",
            TrainMode::SelfsupImageOnly => "selfsup_image_only",
            TrainMode::SelfsupKspaceOnly => "selfsup_kspace_only",
            TrainMode::Supervised => "supervised",
        }
    }

    pub fn is_supervised(self) -> bool {
        self == TrainMode::Supervised
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "selfsup_dual" | "dual" => Ok(TrainMode::SelfsupDual),
            "selfsup_image_only" | "image_only" => Ok(TrainMode::SelfsupImageOnly),
            "selfsup_kspace_only" | "kspace_only" => Ok(TrainMode::SelfsupKspaceOnly),
            "supervised" => Ok(TrainMode::Supervised),
            _ => Err(Error::Param(format!("unknown training mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Partition rate is drawn uniformly from this range at every step.
    pub rho_range: (f64, f64),
    pub accel: f64,
    pub center_fraction: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 3,
            epochs: 50,
            rho_range: (0.2, 0.8),
            accel: 4.0,
            center_fraction: 0.04,
            seed: 0,
            mode: TrainMode::SelfsupDual,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rho_range;
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            return Err(Error::Config(format!("rho range ({lo}, {hi}) must lie inside (0, 1)")));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let w = &self.loss;
        if w.lambda1 < 0.0 || w.lambda2 < 0.0 || w.lambda3 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}
