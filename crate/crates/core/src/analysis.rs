//! Evaluation metrics: accuracy, genetic errors (student mistakes that copy
//! the teacher's wrong class) and the top-2 probability gap curve.

use std::fmt;
use std::io::Write;

use crate::error::{invalid, shape, Result};
use crate::soft_targets::{log_softmax_into, LabelVector, LogitsBatch};

fn check_labels(logits: &LogitsBatch, labels: &LabelVector) -> Result<()> {
    if logits.n() != labels.len() {
        return Err(shape(format!("{} logit rows for {} labels", logits.n(), labels.len())));
    }
    Ok(())
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &LogitsBatch, labels: &LabelVector) -> Result<f64> {
    check_labels(logits, labels)?;
    let correct = (0..logits.n()).filter(|&i| logits.argmax(i) == labels.get(i)).count();
    Ok(correct as f64 / logits.n() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneticErrors {
    pub genetic: usize,
    pub total: usize,
    /// `genetic / total`, or 0 when there are no errors.
    pub ratio: f64,
}

impl fmt::Display for GeneticErrors {
    /// `g/t = p%`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} = {:.2}%", self.genetic, self.total, self.ratio * 100.0)
    }
}

pub fn genetic_errors(student: &LogitsBatch, teacher: &LogitsBatch, labels: &LabelVector) -> Result<GeneticErrors> {
    check_labels(student, labels)?;
    if teacher.n() != student.n() {
        return Err(shape(format!("{} student rows vs {} teacher rows", student.n(), teacher.n())));
    }
    let (mut genetic, mut total) = (0, 0);
    for i in 0..student.n() {
        let s = student.argmax(i);
        if s != labels.get(i) {
            total += 1;
            if s == teacher.argmax(i) {
                genetic += 1;
            }
        }
    }
    let ratio = if total > 0 { genetic as f64 / total as f64 } else { 0.0 };
    Ok(GeneticErrors { genetic, total, ratio })
}

/// Difference between the two largest `softmax(row)` entries.
pub fn top2_gap(row: ndarray::ArrayView1<'_, f64>) -> f64 {
    let mut lp = vec![0.0; row.len()];
    log_softmax_into(row, 1.0, &mut lp);
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in lp.into_iter().map(f64::exp) {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    first - second
}

/// For each threshold, how many samples have a top-2 gap strictly below it.
pub fn top2_gap_curve(student: &LogitsBatch, thresholds: &[f64]) -> Result<Vec<(f64, usize)>> {
    if student.k() < 2 {
        return Err(invalid("top-2 gap needs at least two classes"));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid("thresholds must be sorted ascending"));
    }
    let mut gaps: Vec<f64> = (0..student.n()).map(|i| top2_gap(student.row(i))).collect();
    gaps.sort_by(f64::total_cmp);
    Ok(thresholds
        .iter()
        .map(|&t| (t, gaps.partition_point(|&g| g < t)))
        .collect())
}

/// `count` evenly spaced thresholds in `(0, 1]`.
pub fn default_thresholds(count: usize) -> Vec<f64> {
    (1..=count).map(|i| i as f64 / count as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub total_errors: usize,
    pub genetic_errors: usize,
    pub genetic_ratio: f64,
    pub top2_curve: Vec<(f64, usize)>,
}

impl EvalReport {
    pub fn compute(student: &LogitsBatch, teacher: &LogitsBatch, labels: &LabelVector, thresholds: &[f64]) -> Result<Self> {
        let ge = genetic_errors(student, teacher, labels)?;
        Ok(Self {
            accuracy: accuracy(student, labels)?,
            total_errors: ge.total,
            genetic_errors: ge.genetic,
            genetic_ratio: ge.ratio,
            top2_curve: top2_gap_curve(student, thresholds)?,
        })
    }

    pub fn genetic(&self) -> GeneticErrors {
        GeneticErrors {
            genetic: self.genetic_errors,
            total: self.total_errors,
            ratio: self.genetic_ratio,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "accuracy,total_errors,genetic_errors,genetic_ratio")?;
        writeln!(w, "{},{},{},{}", self.accuracy, self.total_errors, self.genetic_errors, self.genetic_ratio)
    }

    pub fn write_curve_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "threshold,count")?;
        for (t, c) in &self.top2_curve {
            writeln!(w, "{t},{c}")?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "accuracy: {:.2}%\ngenetic errors: {}\n",
            self.accuracy * 100.0,
            self.genetic()
        )
    }
}
