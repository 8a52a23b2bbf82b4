use serde::{Deserialize, Serialize};

use crate::losses::LossWeights;
use crate::mixer::DEFAULT_RATIO;
use crate::wavelet::Family;
use crate::{Error, Result};

/// Optimization and schedule settings for both training phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pretrain_iterations: usize,
    pub ssl_iterations: usize,
    /// Labeled crops per pretraining step; `None` means `2 · pairs`.
    pub pretrain_batch: Option<usize>,
    /// Mixing quadruples `(i, j, p, q)` per SSL step; `None` means 4 in 2D
    /// and 1 in 3D.
    pub pairs: Option<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// EMA smoothing of the teacher.
    pub ema_lambda: f64,
    /// Running-statistics momentum of batch norm.
    pub bn_momentum: f64,
    /// Per-axis size ratio of the pasted block.
    pub mask_ratio: f64,
    pub loss: LossWeights,
    pub wavelet: Family,
    pub seed: u64,
    /// Training crop; empty means the full image.
    pub patch: Vec<usize>,
    /// SSL iterations between validation passes; 0 disables them.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_iterations: 1000,
            ssl_iterations: 2000,
            pretrain_batch: None,
            pairs: None,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            ema_lambda: 0.99,
            bn_momentum: 0.1,
            mask_ratio: DEFAULT_RATIO,
            loss: LossWeights::default(),
            wavelet: Family::Haar,
            seed: 0,
            patch: Vec::new(),
            eval_interval: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("ema_lambda", self.ema_lambda)?;
        unit("bn_momentum", self.bn_momentum)?;
        unit("momentum", self.momentum)?;
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio must lie in (0, 1], got {}",
                self.mask_ratio
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.poly_power >= 0.0) {
            return Err(Error::Config("weight_decay and poly_power must be non-negative".into()));
        }
        if self.pretrain_iterations == 0 && self.ssl_iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.pairs == Some(0) || self.pretrain_batch == Some(0) {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.patch.contains(&0) {
            return Err(Error::Config(format!("patch {:?} has a zero extent", self.patch)));
        }
        self.loss.validate()
    }

    pub fn pairs_for(&self, spatial_rank: usize) -> usize {
        self.pairs.unwrap_or(if spatial_rank == 3 { 1 } else { 4 })
    }

    pub fn pretrain_batch_for(&self, spatial_rank: usize) -> usize {
        self.pretrain_batch
            .unwrap_or(2 * self.pairs_for(spatial_rank))
    }

    /// Polynomial decay from the base rate to zero over `total` steps.
    pub fn lr_at(&self, iteration: usize, total: usize) -> f64 {
        let frac = iteration as f64 / total.max(1) as f64;
        self.learning_rate * (1.0 - frac).max(0.0).powf(self.poly_power)
    }
}
