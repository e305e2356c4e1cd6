//! Knowledge distillation with repaired supervision and per-sample
//! temperatures, plus a small deterministic MLP trainer to run it end to end.

pub mod adjustment;
pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod nn;
pub mod soft_targets;
pub mod temperature;

pub use adjustment::{adjust, adjust_lsr, adjust_ps, find_misjudged, AdjustmentMode, AdjustmentReport};
pub use error::{KdError, Result};
pub use loss::{
    evaluate, grad_student_logits, loss_and_grad, loss_ka, loss_kd, loss_dtd, loss_total, DistillSpec, LossBreakdown,
};
pub use soft_targets::{argmax, cross_entropy, kd_loss, kl_divergence, softmax_tau, LabelVector, LogitsBatch, SoftTargetBatch};
pub use temperature::{DtdConfig, SampleWeights, TauStats, TauVector, WeightScheme};
