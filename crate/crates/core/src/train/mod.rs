//! Training harness: SGD with momentum and coupled weight decay, cosine
//! annealing, per-epoch metrics, evaluation, embedding export, and the
//! statistics used to report repeated runs.

mod embed;
mod metrics;
mod schedule;
mod sgd;
mod stats;
mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Augment, DataError};
use crate::nn::{BackboneKind, NnError};
use crate::tensor::TensorError;

pub use embed::{export_embeddings, write_embeddings, EmbeddingRow};
pub use metrics::{EpochRecord, Evaluation, MetricsLog, METRICS_CSV_HEADER};
pub use schedule::cosine_lr;
pub use sgd::{sgd_step, Sgd};
pub use stats::{one_sample_ttest, RunSummary, TTest};
pub use trainer::{evaluate, model_config_for, train, train_with, EvalOptions, TrainOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite {term} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, term: String },
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// Cross-entropy on the plain head `P1`.
    CePlain,
    /// Cross-entropy on the attention-gated head `P2`.
    CeCam,
    /// Cross-entropy on `P2` plus the attention distance ratio.
    Cc,
}

impl LossMode {
    pub fn uses_attention(self) -> bool {
        !matches!(self, LossMode::CePlain)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::CePlain => "ce",
            LossMode::CeCam => "ce_cam",
            LossMode::Cc => "cc",
        })
    }
}

impl FromStr for LossMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ce" | "ce_plain" => Ok(LossMode::CePlain),
            "ce_cam" => Ok(LossMode::CeCam),
            "cc" => Ok(LossMode::Cc),
            other => Err(format!("unknown loss mode {other:?} (expected ce, ce_cam or cc)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetId {
    Mnist,
    Cifar100,
    Synth,
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Cifar100 => "cifar100",
            DatasetId::Synth => "synth",
        })
    }
}

impl FromStr for DatasetId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mnist" => Ok(DatasetId::Mnist),
            "cifar100" => Ok(DatasetId::Cifar100),
            "synth" => Ok(DatasetId::Synth),
            other => Err(format!("unknown dataset {other:?} (expected mnist, cifar100 or synth)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub dataset: DatasetId,
    pub backbone: BackboneKind,
    pub hidden_dim: usize,
    pub mlp_widths: Vec<usize>,
    pub hflip: bool,
    /// Zero-padding for random crops; 0 disables cropping.
    pub crop_pad: usize,
}

impl TrainConfig {
    /// Workstation-scale defaults for a dataset.
    pub fn desk_default(dataset: DatasetId) -> Self {
        let (epochs, backbone, hflip) = match dataset {
            DatasetId::Mnist => (10, BackboneKind::TinyCnn, false),
            DatasetId::Cifar100 => (30, BackboneKind::TinyCnn, true),
            DatasetId::Synth => (10, BackboneKind::Mlp, false),
        };
        Self {
            epochs,
            batch_size: 32,
            lr_init: 0.1,
            lr_final: 1e-5,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda: 1.0,
            epsilon: 1e-6,
            seed: 0,
            loss_mode: LossMode::Cc,
            dataset,
            backbone,
            hidden_dim: 64,
            mlp_widths: vec![64],
            hflip,
            crop_pad: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return err("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch size must be positive".into());
        }
        if self.loss_mode == LossMode::Cc && self.batch_size < 2 {
            return err("batch size must be ≥ 2 for cc".into());
        }
        if !(self.lr_init > self.lr_final && self.lr_final > 0.0) {
            return err(format!("need lr_init > lr_final > 0, got {} and {}", self.lr_init, self.lr_final));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return err(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return err(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return err(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.hidden_dim == 0 {
            return err("hidden dim must be positive".into());
        }
        Ok(())
    }

    pub fn augment(&self) -> Augment {
        Augment { hflip: self.hflip, crop_pad: (self.crop_pad > 0).then_some(self.crop_pad) }
    }
}
