use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which adjacency the auxiliary GCN propagates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// Conditional co-occurrence probabilities from training AU labels.
    DataDriven,
    /// Uniform random weights, row-normalized, drawn from the run seed.
    Random,
}

/// How the auxiliary branch behaves during the warmup epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxWarmup {
    /// Both losses train from epoch 1; only relabeling waits for warmup.
    RelabelOnly,
    /// The AU loss is also switched off until warmup ends.
    ZeroAuxLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Fraction of each batch placed in the high-confidence group.
    pub phi: f64,
    /// Rank-regularization margin.
    pub theta: f64,
    /// Ramp pivot, in epochs.
    pub beta: f64,
    pub epochs: usize,
    /// Clamped to the training-set size.
    pub batch_size: usize,
    /// Initial learning rate for backbone, confidence and expression classifier.
    pub lr_target: f64,
    /// Epochs after which `lr_target` is multiplied by `lr_step_factor`.
    pub lr_milestones: Vec<usize>,
    pub lr_step_factor: f64,
    /// Initial learning rate for the AU head, GCN and AU classifiers.
    pub lr_aux: f64,
    /// Per-epoch multiplicative decay of `lr_aux`.
    pub lr_aux_decay: f64,
    pub momentum: f64,
    /// Relabeling starts at epoch `warmup_epochs + 1`.
    pub warmup_epochs: usize,
    pub aux_warmup: AuxWarmup,
    pub hidden: usize,
    pub feature_dim: usize,
    /// Per-AU node feature width.
    pub node_dim: usize,
    pub gcn_channels: usize,
    pub leaky_slope: f64,
    pub seed: u64,
    pub use_target: bool,
    pub use_aux: bool,
    pub edges: EdgeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phi: 0.8,
            theta: 0.15,
            beta: 10.0,
            epochs: 40,
            batch_size: 512,
            lr_target: 0.01,
            lr_milestones: vec![10, 20],
            lr_step_factor: 0.1,
            lr_aux: 0.005,
            lr_aux_decay: 0.95,
            momentum: 0.0,
            warmup_epochs: 10,
            aux_warmup: AuxWarmup::RelabelOnly,
            hidden: 64,
            feature_dim: 32,
            node_dim: 16,
            gcn_channels: 64,
            leaky_slope: 0.01,
            seed: 0,
            use_target: true,
            use_aux: true,
            edges: EdgeMode::DataDriven,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return bad("phi must lie in (0, 1)");
        }
        if !(self.theta >= 0.0) {
            return bad("theta must be non-negative");
        }
        if !(self.beta >= 1.0) {
            return bad("beta must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_target > 0.0 && self.lr_aux > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_step_factor > 0.0 && self.lr_aux_decay > 0.0) {
            return bad("learning-rate decay factors must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope must lie in (0, 1)");
        }
        if self.hidden == 0 || self.feature_dim == 0 || self.node_dim == 0 || self.gcn_channels == 0 {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Target-branch learning rate for 1-based `epoch`: one step decay for
    /// each milestone strictly below `epoch`.
    pub fn lr_target_at(&self, epoch: usize) -> f64 {
        let steps = self.lr_milestones.iter().filter(|&&m| epoch > m).count();
        self.lr_target * self.lr_step_factor.powi(steps as i32)
    }

    pub fn lr_aux_at(&self, epoch: usize) -> f64 {
        self.lr_aux * self.lr_aux_decay.powi(epoch.saturating_sub(1) as i32)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Ramp weights `(lambda1, lambda2)` for 1-based `epoch` and pivot `beta`.
pub fn ramp_weights(epoch: usize, beta: f64) -> (f64, f64) {
    let e = epoch as f64;
    if e <= beta {
        let lambda1 = (-(1.0 - e / beta).powi(2)).exp();
        (lambda1, 1.0)
    } else {
        let lambda2 = (-(1.0 - beta / e).powi(2)).exp();
        (1.0, lambda2)
    }
}

/// `(lambda1 / 2)(wce + rr) + lambda2 * au`.
pub fn total_loss(wce: f64, rr: f64, au: f64, lambda1: f64, lambda2: f64) -> f64 {
    0.5 * lambda1 * (wce + rr) + lambda2 * au
}
