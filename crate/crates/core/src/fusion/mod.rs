//! Late-fusion classifier: text embedding plus two small feature encoders,
//! concatenated and classified by an MLP head.

mod model;
mod optim;
mod train;

use alloc::string::String;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, EMBEDDING_DIM};
use crate::evaluation::EvalError;
use crate::features::HEURISTIC_DIM;
use crate::NUM_LABELS;

pub use model::{Example, FusionModel, LossGrad, NormMode, Pass, ParamGroup};
pub use optim::AdamW;
pub use train::{
    argmax, smoothed_cross_entropy, smoothed_target_entropy, softmax, train, Prediction,
    TrainingHistory,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected length {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("row {0} has no label")]
    Unlabeled(String),
    #[error("training set is empty")]
    EmptyTrain,
    #[error("dev set is empty")]
    EmptyDev,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("parameter buffer has {found} values, layout needs {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub text_dim: usize,
    pub heur_dim: usize,
    pub dmrs_dim: usize,
    pub branch_hidden: usize,
    pub branch_out: usize,
    pub branch_dropout: f64,
    pub fused_dim: usize,
    pub head_dims: alloc::vec::Vec<usize>,
    pub head_dropout: f64,
    pub num_labels: usize,
    pub encoder_lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub label_smoothing: f64,
    /// Epochs without a dev macro-F1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            text_dim: EMBEDDING_DIM,
            heur_dim: HEURISTIC_DIM,
            dmrs_dim: 30,
            branch_hidden: 64,
            branch_out: 32,
            branch_dropout: 0.3,
            fused_dim: 832,
            head_dims: alloc::vec![256, 128],
            head_dropout: 0.4,
            num_labels: NUM_LABELS,
            encoder_lr: 1e-6,
            head_lr: 1e-4,
            weight_decay: 1e-2,
            batch_size: 16,
            max_epochs: 20,
            label_smoothing: 0.1,
            patience: 5,
            seed: 42,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |msg: String| Err(FusionError::InvalidConfig(msg));
        if self.num_labels != NUM_LABELS {
            return bad(alloc::format!(
                "num_labels must be {NUM_LABELS}, got {}",
                self.num_labels
            ));
        }
        let concat = self.text_dim + 2 * self.branch_out;
        if self.fused_dim != concat {
            return bad(alloc::format!(
                "fused_dim {} != text_dim {} + 2 x branch_out {} = {concat}",
                self.fused_dim,
                self.text_dim,
                self.branch_out
            ));
        }
        let dims = [
            ("text_dim", self.text_dim),
            ("heur_dim", self.heur_dim),
            ("dmrs_dim", self.dmrs_dim),
            ("branch_hidden", self.branch_hidden),
            ("branch_out", self.branch_out),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
        ];
        for (name, v) in dims {
            if v == 0 {
                return bad(alloc::format!("{name} must be positive"));
            }
        }
        if self.head_dims.contains(&0) {
            return bad("head_dims entries must be positive".into());
        }
        for (name, p) in [
            ("branch_dropout", self.branch_dropout),
            ("head_dropout", self.head_dropout),
            ("label_smoothing", self.label_smoothing),
            ("bn_momentum", self.bn_momentum),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(alloc::format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        for (name, v) in [
            ("encoder_lr", self.encoder_lr),
            ("head_lr", self.head_lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(alloc::format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.bn_eps > 0.0 && self.adam_eps > 0.0) {
            return bad("bn_eps and adam_eps must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
