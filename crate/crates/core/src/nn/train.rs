use std::io::Write;

use log::{debug, info};

use super::{backward, forward, lr_at, sgd_step, LrSchedule, NetworkParams, Velocity};
use crate::analysis::accuracy;
use crate::data::{batches, predict_logits, Dataset};
use crate::error::{invalid, shape, KdError, Result};
use crate::loss::{loss_and_grad, loss_ce, DistillSpec, LossBreakdown};
use crate::soft_targets::LogitsBatch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainLoss {
    CrossEntropy,
    Distill(DistillSpec),
}

impl TrainLoss {
    pub fn name(&self) -> &'static str {
        match self {
            TrainLoss::CrossEntropy => "ce",
            TrainLoss::Distill(s) => s.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub loss: TrainLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            lr0: 0.003,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: LrSchedule::Cosine { total_epochs: 60 },
            seed: 1,
            loss: TrainLoss::CrossEntropy,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid(format!("weight_decay must be nonnegative, got {}", self.weight_decay)));
        }
        self.schedule.validate()?;
        if let TrainLoss::Distill(spec) = &self.loss {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Where distillation targets come from. Precomputed logits are row-aligned
/// with the training set.
#[derive(Debug, Clone, Copy)]
pub enum TeacherSource<'a> {
    None,
    Network(&'a NetworkParams),
    Logits(&'a LogitsBatch),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Summed batch losses divided by the number of training samples.
    pub train_loss: f64,
    /// Accuracy of the pre-update logits seen during the epoch.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub tau_min: f64,
    pub tau_mean: f64,
    pub tau_max: f64,
    pub clamped_count: usize,
    pub misjudged_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl MetricsLog {
    pub const EPOCH_HEADER: &'static str =
        "epoch,lr,train_loss,train_acc,val_acc,tau_min,tau_mean,tau_max,clamped_count,misjudged_count";

    pub fn write_epochs_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::EPOCH_HEADER)?;
        for e in &self.epochs {
            let val = e.val_acc.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.lr,
                e.train_loss,
                e.train_acc,
                val,
                e.tau_min,
                e.tau_mean,
                e.tau_max,
                e.clamped_count,
                e.misjudged_count
            )?;
        }
        Ok(())
    }

    pub fn write_steps_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,step,lr,{}", LossBreakdown::CSV_HEADER)?;
        for s in &self.steps {
            writeln!(w, "{},{},{},{}", s.epoch, s.step, s.lr, s.loss.csv_row())?;
        }
        Ok(())
    }

    pub fn final_val_acc(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_acc)
    }
}

struct EpochAccumulator {
    loss: f64,
    correct: f64,
    seen: usize,
    tau_min: f64,
    tau_weighted: f64,
    tau_max: f64,
    clamped: usize,
    misjudged: usize,
}

impl EpochAccumulator {
    fn new() -> Self {
        Self {
            loss: 0.0,
            correct: 0.0,
            seen: 0,
            tau_min: f64::INFINITY,
            tau_weighted: 0.0,
            tau_max: f64::NEG_INFINITY,
            clamped: 0,
            misjudged: 0,
        }
    }

    fn add(&mut self, b: &LossBreakdown, n: usize, acc: f64) {
        self.loss += b.total;
        self.correct += acc * n as f64;
        self.seen += n;
        self.tau_min = self.tau_min.min(b.tau_stats.min);
        self.tau_max = self.tau_max.max(b.tau_stats.max);
        self.tau_weighted += b.tau_stats.mean * n as f64;
        self.clamped += b.tau_stats.clamped_count;
        self.misjudged += b.adjustment.misjudged_count();
    }
}

fn check_finite(step: usize, what: &str, mut values: impl Iterator<Item = f64>) -> Result<()> {
    if values.any(|x| !x.is_finite()) {
        return Err(KdError::Numerical { step, what: what.to_string() });
    }
    Ok(())
}

/// Trains `student` in place of a copy and returns the final parameters with
/// per-epoch and per-step metrics.
pub fn train(
    teacher: TeacherSource<'_>,
    student: &NetworkParams,
    train_ds: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, MetricsLog)> {
    cfg.validate()?;
    student.validate()?;
    if train_ds.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if student.input_dim() != train_ds.dim() || student.output_dim() != train_ds.k() {
        return Err(shape(format!(
            "student {} does not fit data with {} features and {} classes",
            student.arch_tag,
            train_ds.dim(),
            train_ds.k()
        )));
    }
    if let TrainLoss::Distill(_) = cfg.loss {
        match teacher {
            TeacherSource::None => {
                return Err(KdError::Config(format!(
                    "loss '{}' needs a teacher checkpoint or teacher logits",
                    cfg.loss.name()
                )))
            }
            TeacherSource::Network(t) if t.input_dim() != train_ds.dim() || t.output_dim() != train_ds.k() => {
                return Err(shape(format!("teacher {} does not fit the training data", t.arch_tag)))
            }
            TeacherSource::Logits(l) if l.n() != train_ds.len() || l.k() != train_ds.k() => {
                return Err(shape(format!(
                    "teacher logits are {}×{}, training set is {}×{}",
                    l.n(),
                    l.k(),
                    train_ds.len(),
                    train_ds.k()
                )))
            }
            _ => {}
        }
    }

    let mut params = student.clone();
    let mut velocity = Velocity::zeros_like(&params);
    let mut log = MetricsLog::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg.lr0, &cfg.schedule, epoch);
        let mut acc = EpochAccumulator::new();
        for batch in batches(train_ds, cfg.batch_size, cfg.seed, epoch)? {
            let (out, cache) = forward(&params, batch.features.view())?;
            check_finite(step, "student logits", out.iter().copied())?;
            let v = LogitsBatch::with_ids(out, batch.ids.clone())?;
            let (breakdown, dlogits) = match cfg.loss {
                TrainLoss::CrossEntropy => loss_ce(&v, &batch.labels)?,
                TrainLoss::Distill(spec) => {
                    let t = match teacher {
                        TeacherSource::Network(tp) => predict_logits(tp, batch.features.view())?,
                        TeacherSource::Logits(l) => l.select(&batch.rows)?,
                        TeacherSource::None => unreachable!("checked above"),
                    };
                    loss_and_grad(&spec, &v, &t, &batch.labels)?
                }
            };
            check_finite(step, "loss", std::iter::once(breakdown.total))?;
            check_finite(step, "logit gradient", dlogits.iter().copied())?;
            let grads = backward(&params, &cache, dlogits.view())?;
            sgd_step(&mut params, &grads, &mut velocity, lr, cfg.momentum, cfg.weight_decay);
            check_finite(
                step,
                "parameters after update",
                params.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter())).copied(),
            )?;

            acc.add(&breakdown, batch.rows.len(), accuracy(&v, &batch.labels)?);
            debug!("epoch {epoch} step {step}: loss {}", breakdown.total);
            log.steps.push(StepRecord { epoch, step, lr, loss: breakdown });
            step += 1;
        }
        let val_acc = match val {
            Some(ds) => {
                let logits = predict_logits(&params, ds.features.view()).map_err(|e| match e {
                    KdError::InvalidArgument(m) => KdError::Numerical { step, what: format!("validation logits: {m}") },
                    other => other,
                })?;
                Some(accuracy(&logits, &ds.labels)?)
            }
            None => None,
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: acc.loss / acc.seen as f64,
            train_acc: acc.correct / acc.seen as f64,
            val_acc,
            tau_min: acc.tau_min,
            tau_mean: acc.tau_weighted / acc.seen as f64,
            tau_max: acc.tau_max,
            clamped_count: acc.clamped,
            misjudged_count: acc.misjudged,
        };
        info!(
            "[{}] epoch {epoch}: lr {lr:.5} loss {:.5} train {:.4} val {}",
            cfg.loss.name(),
            record.train_loss,
            record.train_acc,
            val_acc.map_or("-".to_string(), |a| format!("{a:.4}"))
        );
        log.epochs.push(record);
    }
    Ok((params, log))
}
