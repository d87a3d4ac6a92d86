//! Adam training, k-fold cross-validation over subjects and screening
//! metrics.

mod adam;
mod cv;
mod folds;
mod metrics;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{adam_step, AdamState};
pub use cv::{cross_validate, CvOutcome, LeakageAudit, Method, RunLog};
pub use folds::FoldPlan;
pub use metrics::{Confusion, MetricsReport, MetricsRow, Summary, AGGREGATION_NOTE, CSV_HEADER};
pub use train::{audit_leakage, evaluate, evaluate_sds_sum, predict, train, EpochRecord, Prediction, TrainLog, Trained};

use crate::models::ModelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("gradient: {0}")]
    Gradient(String),
    #[error("loss diverged in epoch {epoch} (last finite epoch: {}): {msg}", last_finite.map_or("none".to_string(), |e| e.to_string()))]
    Diverged { epoch: usize, last_finite: Option<usize>, msg: String },
    #[error("held-out subject {subject} appears in a training batch of fold {fold}")]
    Leakage { subject: String, fold: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl TrainError {
    /// Numeric failures, as opposed to configuration mistakes.
    pub fn is_numeric(&self) -> bool {
        match self {
            TrainError::Gradient(_) | TrainError::Diverged { .. } => true,
            TrainError::Model(ModelError::Tensor(e)) => matches!(e, sdsnet_tensor::TensorError::NonFinite { .. }),
            _ => false,
        }
    }
}

/// Optimizer and protocol settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Subjects per mini-batch.
    pub batch_size: usize,
    pub epochs: usize,
    /// One full cross-validation per seed; the seed drives initialization
    /// and batch order.
    pub seeds: Vec<u64>,
    pub folds: usize,
    /// Seed of the subject-to-fold assignment, shared by all runs.
    pub fold_seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: 30 epochs.
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 2,
            epochs: 30,
            seeds: vec![1, 2, 3, 4, 5],
            folds: 5,
            fold_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale protocol: 200 epochs.
    pub fn full() -> Self {
        TrainConfig { epochs: 200, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.folds));
        }
        Ok(())
    }
}
