//! Knowledge adjustment: find the samples the teacher gets wrong and repair
//! their soft targets so every target row peaks at the ground-truth class.
//!
//! Two repairs are provided. LSR replaces the whole row with a smoothed
//! one-hot label; Probability Shift swaps the teacher's predicted maximum
//! with the ground-truth entry, keeping every value of the row.

use std::io::Write;

use ndarray::{ArrayView2, ArrayViewMut1};

use crate::error::{invalid, shape, Result};
use crate::soft_targets::{argmax_view, LabelVector, LogitsBatch, SoftTargetBatch};

/// Default LSR smoothing factor.
pub const DEFAULT_EPSILON: f64 = 0.985;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdjustmentMode {
    None,
    Lsr { epsilon: f64 },
    ProbabilityShift,
}

impl AdjustmentMode {
    pub fn lsr() -> Self {
        AdjustmentMode::Lsr { epsilon: DEFAULT_EPSILON }
    }

    pub fn validate(&self) -> Result<()> {
        if let AdjustmentMode::Lsr { epsilon } = *self {
            check_epsilon(epsilon)?;
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdjustmentMode::None => "none",
            AdjustmentMode::Lsr { .. } => "lsr",
            AdjustmentMode::ProbabilityShift => "ps",
        }
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid(format!("LSR epsilon must lie in (0, 1), got {epsilon}")));
    }
    Ok(())
}

/// Which samples the teacher misjudged, for auditing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdjustmentReport {
    pub misjudged_ids: Vec<usize>,
    pub teacher_argmax: Vec<usize>,
    pub ground_truth: Vec<usize>,
    pub mode: Option<AdjustmentMode>,
}

impl AdjustmentReport {
    pub fn misjudged_count(&self) -> usize {
        self.misjudged_ids.len()
    }

    /// CSV with header `sample_id,teacher_argmax,ground_truth`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "sample_id,teacher_argmax,ground_truth")?;
        for ((id, pred), truth) in self
            .misjudged_ids
            .iter()
            .zip(&self.teacher_argmax)
            .zip(&self.ground_truth)
        {
            writeln!(w, "{id},{pred},{truth}")?;
        }
        Ok(())
    }
}

/// Anything with one row of class scores per sample.
pub trait ClassScores {
    fn scores(&self) -> ArrayView2<'_, f64>;
    fn sample_ids(&self) -> &[usize];
}

impl ClassScores for LogitsBatch {
    fn scores(&self) -> ArrayView2<'_, f64> {
        self.values()
    }
    fn sample_ids(&self) -> &[usize] {
        self.ids()
    }
}

impl ClassScores for SoftTargetBatch {
    fn scores(&self) -> ArrayView2<'_, f64> {
        self.values()
    }
    fn sample_ids(&self) -> &[usize] {
        self.ids()
    }
}

/// `mask[i]` is true when the row's argmax differs from `y[i]`.
///
/// Softening preserves argmax, so this gives the same mask on raw teacher
/// logits and on targets softened at any temperature.
pub fn find_misjudged<S: ClassScores + ?Sized>(scores: &S, y: &LabelVector) -> Result<(Vec<bool>, AdjustmentReport)> {
    let values = scores.scores();
    y.check_against(values.nrows(), values.ncols())?;
    let mut mask = Vec::with_capacity(values.nrows());
    let mut report = AdjustmentReport::default();
    for (i, row) in values.rows().into_iter().enumerate() {
        let pred = argmax_view(row);
        let wrong = pred != y.get(i);
        if wrong {
            report.misjudged_ids.push(scores.sample_ids()[i]);
            report.teacher_argmax.push(pred);
            report.ground_truth.push(y.get(i));
        }
        mask.push(wrong);
    }
    Ok((mask, report))
}

/// Smoothed label `(1 − ε)·δ(label) + ε/K` written into `row`.
pub(crate) fn write_lsr_row(mut row: ArrayViewMut1<'_, f64>, label: usize, epsilon: f64) {
    let k = row.len();
    let off = epsilon / k as f64;
    row.fill(off);
    row[label] = (1.0 - epsilon) + off;
}

/// Swaps the row's (lowest-index) maximum with the `label` entry.
pub(crate) fn shift_row(mut row: ArrayViewMut1<'_, f64>, label: usize) {
    let top = argmax_view(row.view());
    row.swap(top, label);
}

fn check_mask(q: &SoftTargetBatch, y: &LabelVector, mask: &[bool]) -> Result<()> {
    y.check_against(q.n(), q.k())?;
    if mask.len() != q.n() {
        return Err(shape(format!("mask of {} for {} rows", mask.len(), q.n())));
    }
    Ok(())
}

/// Replaces masked rows with the LSR label. Must be applied to targets that
/// are already softened.
pub fn adjust_lsr(q_tau: &SoftTargetBatch, y: &LabelVector, mask: &[bool], epsilon: f64) -> Result<SoftTargetBatch> {
    check_epsilon(epsilon)?;
    check_mask(q_tau, y, mask)?;
    let mut out = q_tau.clone();
    for (i, mut row) in out.values_mut().rows_mut().into_iter().enumerate() {
        if mask[i] {
            write_lsr_row(row.view_mut(), y.get(i), epsilon);
        }
    }
    Ok(out)
}

/// Swaps the predicted maximum and the ground-truth entry of masked rows.
pub fn adjust_ps(q_tau: &SoftTargetBatch, y: &LabelVector, mask: &[bool]) -> Result<SoftTargetBatch> {
    check_mask(q_tau, y, mask)?;
    let mut out = q_tau.clone();
    for (i, row) in out.values_mut().rows_mut().into_iter().enumerate() {
        if mask[i] {
            shift_row(row, y.get(i));
        }
    }
    Ok(out)
}

/// Applies `mode` to every misjudged row. Afterwards every row's argmax is the
/// ground truth (unless `mode` is `None`, which returns the input unchanged).
pub fn adjust(q_tau: &SoftTargetBatch, y: &LabelVector, mode: AdjustmentMode) -> Result<(SoftTargetBatch, AdjustmentReport)> {
    mode.validate()?;
    let (mask, mut report) = find_misjudged(q_tau, y)?;
    report.mode = Some(mode);
    let out = match mode {
        AdjustmentMode::None => q_tau.clone(),
        AdjustmentMode::Lsr { epsilon } => adjust_lsr(q_tau, y, &mask, epsilon)?,
        AdjustmentMode::ProbabilityShift => adjust_ps(q_tau, y, &mask)?,
    };
    Ok((out, report))
}
