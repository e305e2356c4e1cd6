//! Temperature-scaled softmax, divergences and the classical distillation loss.
//!
//! Everything here works in `f64`. Rows are samples, columns are classes.
//! Argmax ties are always resolved towards the lowest class index.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{invalid, shape, Result};
use crate::temperature::TauVector;

/// Probabilities are floored at this value before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-300;

/// Index of the largest entry; the lowest index wins on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmax_view(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_val = row[0];
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > best_val {
            best = i;
            best_val = x;
        }
    }
    best
}

pub(crate) fn safe_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// Writes `log softmax(z / tau)` into `out` and returns nothing; uses
/// max-subtraction so large logits never overflow.
pub(crate) fn log_softmax_into(z: ArrayView1<'_, f64>, tau: f64, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(z.iter()) {
        *o = (x - max) / tau;
        sum += o.exp();
    }
    let lse = sum.ln();
    for o in out.iter_mut() {
        *o -= lse;
    }
}

/// Raw model outputs for a batch: `n` samples by `k` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch {
    values: Array2<f64>,
    ids: Vec<usize>,
}

impl LogitsBatch {
    /// Wraps a logits matrix; sample ids default to `0..n`.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let ids = (0..values.nrows()).collect();
        Self::with_ids(values, ids)
    }

    pub fn with_ids(values: Array2<f64>, ids: Vec<usize>) -> Result<Self> {
        let (n, k) = values.dim();
        if n < 1 {
            return Err(invalid("logits batch needs at least one sample"));
        }
        if k < 2 {
            return Err(invalid(format!("logits need at least two classes, got {k}")));
        }
        if ids.len() != n {
            return Err(shape(format!("{} ids for {n} logit rows", ids.len())));
        }
        if let Some(pos) = values.iter().position(|x| !x.is_finite()) {
            return Err(invalid(format!(
                "non-finite logit at row {}, column {}",
                pos / k,
                pos % k
            )));
        }
        Ok(Self { values, ids })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(shape("ragged logit rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), k), flat).map_err(|e| shape(e.to_string()))?;
        Self::new(values)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn argmax(&self, i: usize) -> usize {
        argmax_view(self.values.row(i))
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Rows selected by position, keeping their ids.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let values = self.values.select(Axis(0), rows);
        let ids = rows.iter().map(|&r| self.ids[r]).collect();
        Self::with_ids(values, ids)
    }
}

/// Row-stochastic targets or predictions together with the temperature of
/// each row (empty when the rows did not come from a softmax).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTargetBatch {
    values: Array2<f64>,
    tau_used: Vec<f64>,
    ids: Vec<usize>,
}

impl SoftTargetBatch {
    /// Validates that every row is a probability distribution (sum within
    /// 1e-9 of one, entries in [0, 1]).
    pub fn from_probabilities(values: Array2<f64>) -> Result<Self> {
        let (n, k) = values.dim();
        if n < 1 || k < 2 {
            return Err(invalid(format!("degenerate probability batch {n}x{k}")));
        }
        for (i, row) in values.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(invalid(format!("row {i} has an entry outside [0, 1]")));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("row {i} sums to {s}, not 1")));
            }
        }
        Ok(Self {
            values,
            tau_used: Vec::new(),
            ids: (0..n).collect(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(shape("ragged probability rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), k), flat).map_err(|e| shape(e.to_string()))?;
        Self::from_probabilities(values)
    }

    pub(crate) fn from_parts(values: Array2<f64>, tau_used: Vec<f64>, ids: Vec<usize>) -> Self {
        Self { values, tau_used, ids }
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn tau_used(&self) -> &[f64] {
        &self.tau_used
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn argmax(&self, i: usize) -> usize {
        argmax_view(self.values.row(i))
    }

    pub(crate) fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }
}

/// Ground-truth class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    class_index: Vec<usize>,
    k: usize,
}

impl LabelVector {
    pub fn new(class_index: Vec<usize>, k: usize) -> Result<Self> {
        if let Some((i, &c)) = class_index.iter().enumerate().find(|(_, &c)| c >= k) {
            return Err(invalid(format!("label {c} at sample {i} is out of range for {k} classes")));
        }
        Ok(Self { class_index, k })
    }

    pub fn len(&self) -> usize {
        self.class_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_index.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.class_index
    }

    pub fn get(&self, i: usize) -> usize {
        self.class_index[i]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            class_index: rows.iter().map(|&r| self.class_index[r]).collect(),
            k: self.k,
        }
    }

    pub(crate) fn check_against(&self, n: usize, k: usize) -> Result<()> {
        if self.len() != n {
            return Err(shape(format!("{} labels for {n} samples", self.len())));
        }
        if self.k > k {
            if let Some(c) = self.class_index.iter().find(|&&c| c >= k) {
                return Err(invalid(format!("label {c} out of range for {k} classes")));
            }
        }
        Ok(())
    }
}

/// A single temperature for the whole batch or one per sample.
#[derive(Debug, Clone, Copy)]
pub enum Temperature<'a> {
    Scalar(f64),
    PerSample(&'a [f64]),
}

impl From<f64> for Temperature<'_> {
    fn from(t: f64) -> Self {
        Temperature::Scalar(t)
    }
}

impl<'a> From<&'a TauVector> for Temperature<'a> {
    fn from(t: &'a TauVector) -> Self {
        Temperature::PerSample(t.tau())
    }
}

impl<'a> From<&'a [f64]> for Temperature<'a> {
    fn from(t: &'a [f64]) -> Self {
        Temperature::PerSample(t)
    }
}

impl Temperature<'_> {
    fn resolve(&self, n: usize) -> Result<Vec<f64>> {
        let taus = match *self {
            Temperature::Scalar(t) => vec![t; n],
            Temperature::PerSample(ts) => {
                if ts.len() != n {
                    return Err(shape(format!("{} temperatures for {n} rows", ts.len())));
                }
                ts.to_vec()
            }
        };
        if let Some(t) = taus.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(invalid(format!("temperature must be positive and finite, got {t}")));
        }
        Ok(taus)
    }
}

/// `softmax(logits / tau)` row by row.
pub fn softmax_tau<'a>(logits: &LogitsBatch, tau: impl Into<Temperature<'a>>) -> Result<SoftTargetBatch> {
    let taus = tau.into().resolve(logits.n())?;
    let mut out = Array2::zeros(logits.values.dim());
    let mut buf = vec![0.0; logits.k()];
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        log_softmax_into(logits.row(i), taus[i], &mut buf);
        for (o, &l) in row.iter_mut().zip(&buf) {
            *o = l.exp();
        }
    }
    Ok(SoftTargetBatch::from_parts(out, taus, logits.ids.clone()))
}

fn check_same_shape(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Per-sample `KL(target || pred) = Σ target · ln(target / pred)`.
///
/// Zero target entries contribute nothing. Tiny negative results from
/// rounding are clipped to zero.
pub fn kl_divergence(target: &SoftTargetBatch, pred: &SoftTargetBatch) -> Result<Vec<f64>> {
    check_same_shape(target.values(), pred.values())?;
    Ok(target
        .values
        .rows()
        .into_iter()
        .zip(pred.values.rows())
        .map(|(q, p)| {
            let kl: f64 = q
                .iter()
                .zip(p.iter())
                .filter(|(&qi, _)| qi > 0.0)
                .map(|(&qi, &pi)| qi * (qi.ln() - safe_ln(pi)))
                .sum();
            kl.max(0.0)
        })
        .collect())
}

/// Per-sample cross entropy between two distributions, `−Σ target · ln pred`.
pub fn soft_cross_entropy(target: &SoftTargetBatch, pred: &SoftTargetBatch) -> Result<Vec<f64>> {
    check_same_shape(target.values(), pred.values())?;
    Ok(target
        .values
        .rows()
        .into_iter()
        .zip(pred.values.rows())
        .map(|(q, p)| -q.iter().zip(p.iter()).map(|(&qi, &pi)| qi * safe_ln(pi)).sum::<f64>())
        .collect())
}

/// Per-sample `−ln pred[label]`.
pub fn cross_entropy(labels: &LabelVector, pred: &SoftTargetBatch) -> Result<Vec<f64>> {
    labels.check_against(pred.n(), pred.k())?;
    Ok(labels
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &y)| -safe_ln(pred.values[[i, y]]))
        .collect())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn check_pair(v: &LogitsBatch, t: &LogitsBatch, y: &LabelVector) -> Result<()> {
    check_same_shape(v.values(), t.values())?;
    y.check_against(v.n(), v.k())
}

/// Classical distillation loss, summed over the batch:
/// `α τ² Σ KL(q_τ, p_τ) + (1 − α) Σ H(y, p_1)`.
///
/// The soft part is written with KL divergence; it differs from the
/// cross-entropy form only by the teacher entropy, which does not depend on
/// the student, so the gradients agree. See [`kd_loss_cross_entropy_form`].
pub fn kd_loss(v: &LogitsBatch, t: &LogitsBatch, y: &LabelVector, tau: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_pair(v, t, y)?;
    let q = softmax_tau(t, tau)?;
    let p = softmax_tau(v, tau)?;
    let p1 = softmax_tau(v, 1.0)?;
    let kl: f64 = kl_divergence(&q, &p)?.iter().sum();
    let ce: f64 = cross_entropy(y, &p1)?.iter().sum();
    Ok(alpha * tau * tau * kl + (1.0 - alpha) * ce)
}

/// Same as [`kd_loss`] but with `H(q_τ, p_τ)` in place of the KL term.
pub fn kd_loss_cross_entropy_form(
    v: &LogitsBatch,
    t: &LogitsBatch,
    y: &LabelVector,
    tau: f64,
    alpha: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    check_pair(v, t, y)?;
    let q = softmax_tau(t, tau)?;
    let p = softmax_tau(v, tau)?;
    let p1 = softmax_tau(v, 1.0)?;
    let h: f64 = soft_cross_entropy(&q, &p)?.iter().sum();
    let ce: f64 = cross_entropy(y, &p1)?.iter().sum();
    Ok(alpha * tau * tau * h + (1.0 - alpha) * ce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn logits(rows: &[Vec<f64>]) -> LogitsBatch {
        LogitsBatch::from_rows(rows).unwrap()
    }

    #[test]
    fn symmetric_row_is_uniform() {
        let p = softmax_tau(&logits(&[vec![0.0, 0.0]]), 5.0).unwrap();
        assert_eq!(p.values(), array![[0.5, 0.5]]);
    }

    #[test]
    fn ln2_row_gives_two_thirds() {
        let p = softmax_tau(&logits(&[vec![2f64.ln(), 0.0]]), 1.0).unwrap();
        assert!((p.values()[[0, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.values()[[0, 1]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn high_temperature_flattens() {
        let p = softmax_tau(&logits(&[vec![1.0, 0.0]]), 100.0).unwrap();
        assert!((p.values()[[0, 0]] - 0.5).abs() < 0.01);
        assert!((p.values()[[0, 1]] - 0.5).abs() < 0.01);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let p = softmax_tau(&logits(&[vec![1000.0, 999.0, -1000.0]]), 1.0).unwrap();
        assert!(p.values().iter().all(|x| x.is_finite()));
        assert!((p.values().sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_temperature_and_nan() {
        let l = logits(&[vec![1.0, 0.0]]);
        assert!(softmax_tau(&l, 0.0).is_err());
        assert!(softmax_tau(&l, -1.0).is_err());
        assert!(softmax_tau(&l, [1.0, 2.0].as_slice()).is_err());
        assert!(LogitsBatch::from_rows(&[vec![f64::NAN, 0.0]]).is_err());
        assert!(LogitsBatch::from_rows(&[vec![1.0]]).is_err());
    }

    #[test]
    fn per_sample_temperatures_apply_per_row() {
        let l = logits(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let p = softmax_tau(&l, [1.0, 2.0].as_slice()).unwrap();
        assert!(p.values()[[0, 0]] > p.values()[[1, 0]]);
        assert_eq!(p.tau_used(), &[1.0, 2.0]);
    }

    #[test]
    fn kl_identity_and_hand_value() {
        let a = SoftTargetBatch::from_rows(&[vec![0.3, 0.7]]).unwrap();
        assert_eq!(kl_divergence(&a, &a).unwrap(), vec![0.0]);

        let q = SoftTargetBatch::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let p = SoftTargetBatch::from_rows(&[vec![0.9, 0.1]]).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl_divergence(&q, &p).unwrap()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn kl_smoothed_one_hot_against_uniform() {
        let eps = 1e-9;
        let q_row = vec![1.0 - eps, eps / 3.0, eps / 3.0, eps / 3.0];
        let q = SoftTargetBatch::from_rows(std::slice::from_ref(&q_row)).unwrap();
        let p = SoftTargetBatch::from_rows(&[vec![0.25; 4]]).unwrap();
        // naive summation oracle
        let mut oracle = 0.0;
        for &qi in &q_row {
            oracle += qi * (qi / 0.25).ln();
        }
        assert!((kl_divergence(&q, &p).unwrap()[0] - oracle).abs() < 1e-12);
    }

    #[test]
    fn kl_shape_mismatch() {
        let a = SoftTargetBatch::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let b = SoftTargetBatch::from_rows(&[vec![0.2, 0.3, 0.5]]).unwrap();
        assert!(kl_divergence(&a, &b).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let eps = 1e-3;
        let p = SoftTargetBatch::from_rows(&[vec![1.0 - eps, eps]]).unwrap();
        let y = LabelVector::new(vec![0], 2).unwrap();
        assert!((cross_entropy(&y, &p).unwrap()[0] + (1.0 - eps).ln()).abs() < 1e-15);

        let u = SoftTargetBatch::from_rows(&[vec![0.1; 10]]).unwrap();
        let y = LabelVector::new(vec![7], 10).unwrap();
        assert!((cross_entropy(&y, &u).unwrap()[0] - 10f64.ln()).abs() < 1e-12);

        let p = SoftTargetBatch::from_rows(&[vec![0.25, 0.75]]).unwrap();
        let y = LabelVector::new(vec![1], 2).unwrap();
        assert!((cross_entropy(&y, &p).unwrap()[0] + 0.75f64.ln()).abs() < 1e-15);

        assert!(LabelVector::new(vec![2], 2).is_err());
        let y = LabelVector::new(vec![5], 10).unwrap();
        assert!(cross_entropy(&y, &p).is_err());
    }

    #[test]
    fn kd_loss_identity_case() {
        // p_1 numerically one-hot on the label; v == t.
        let v = logits(&[vec![800.0, 0.0, 0.0]]);
        let y = LabelVector::new(vec![0], 3).unwrap();
        assert!(kd_loss(&v, &v, &y, 4.0, 0.7).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kd_loss_alpha_one_ignores_labels() {
        let v = logits(&[vec![0.3, -1.2, 0.8], vec![1.0, 0.1, -0.4]]);
        let t = logits(&[vec![1.3, 0.2, -0.8], vec![-0.5, 2.0, 0.3]]);
        let y0 = LabelVector::new(vec![0, 1], 3).unwrap();
        let y1 = LabelVector::new(vec![2, 0], 3).unwrap();
        let a = kd_loss(&v, &t, &y0, 4.0, 1.0).unwrap();
        let b = kd_loss(&v, &t, &y1, 4.0, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(kd_loss(&v, &t, &y0, 4.0, 1.5).is_err());
        assert!(kd_loss(&v, &t, &y0, 4.0, -0.1).is_err());
    }

    #[test]
    fn kd_loss_matches_direct_formula() {
        let vr = [[0.31, -1.17, 0.82], [1.04, 0.12, -0.43]];
        let tr = [[1.27, 0.25, -0.81], [-0.52, 1.96, 0.33]];
        let y = [2usize, 1];
        let (tau, alpha) = (4.0, 0.7);
        // direct oracle: plain exp, no max shift
        let sm = |z: &[f64; 3], t: f64| {
            let e: Vec<f64> = z.iter().map(|x| (x / t).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let mut oracle = 0.0;
        for i in 0..2 {
            let q = sm(&tr[i], tau);
            let p = sm(&vr[i], tau);
            let p1 = sm(&vr[i], 1.0);
            let kl: f64 = (0..3).map(|j| q[j] * (q[j] / p[j]).ln()).sum();
            oracle += alpha * tau * tau * kl - (1.0 - alpha) * p1[y[i]].ln();
        }
        let v = logits(&vr.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        let t = logits(&tr.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
        let labels = LabelVector::new(y.to_vec(), 3).unwrap();
        let got = kd_loss(&v, &t, &labels, tau, alpha).unwrap();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    }

    #[test]
    fn cross_entropy_form_differs_by_teacher_entropy() {
        let v = logits(&[vec![0.3, -1.2, 0.8], vec![1.0, 0.1, -0.4]]);
        let t = logits(&[vec![1.3, 0.2, -0.8], vec![-0.5, 2.0, 0.3]]);
        let y = LabelVector::new(vec![0, 1], 3).unwrap();
        let (tau, alpha) = (3.0, 0.7);
        let q = softmax_tau(&t, tau).unwrap();
        let entropy: f64 = q.values().iter().map(|&x| -x * x.ln()).sum();
        let kl_form = kd_loss(&v, &t, &y, tau, alpha).unwrap();
        let ce_form = kd_loss_cross_entropy_form(&v, &t, &y, tau, alpha).unwrap();
        assert!((ce_form - kl_form - alpha * tau * tau * entropy).abs() < 1e-10);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert_eq!(argmax(&[-3.0, -1.0, -2.0]), 1);
    }

    fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
        (2usize..12).prop_flat_map(|k| prop::collection::vec(-30.0f64..30.0, k))
    }

    proptest! {
        #[test]
        fn rows_are_stochastic_and_positive(row in row_strategy(), tau in 0.05f64..50.0) {
            let p = softmax_tau(&LogitsBatch::from_rows(&[row]).unwrap(), tau).unwrap();
            prop_assert!((p.values().sum() - 1.0).abs() < 1e-9);
            prop_assert!(p.values().iter().all(|&x| x > 0.0));
        }

        #[test]
        fn argmax_is_preserved(row in row_strategy(), tau in 0.1f64..50.0) {
            let l = LogitsBatch::from_rows(std::slice::from_ref(&row)).unwrap();
            let p = softmax_tau(&l, tau).unwrap();
            prop_assert_eq!(p.argmax(0), argmax(&row));
        }

        #[test]
        fn higher_temperature_is_flatter(row in row_strategy(), t1 in 0.1f64..20.0, dt in 0.0f64..20.0) {
            let l = LogitsBatch::from_rows(&[row]).unwrap();
            let spread = |t: f64| {
                let p = softmax_tau(&l, t).unwrap();
                let v = p.values();
                v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min)
            };
            prop_assert!(spread(t1 + dt) <= spread(t1) + 1e-12);
        }

        #[test]
        fn unit_temperature_is_plain_softmax(row in row_strategy()) {
            let l = LogitsBatch::from_rows(std::slice::from_ref(&row)).unwrap();
            let p = softmax_tau(&l, 1.0).unwrap();
            let m = row.iter().copied().fold(f64::MIN, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for (j, x) in row.iter().enumerate() {
                prop_assert!((p.values()[[0, j]] - (x - m).exp() / s).abs() < 1e-14);
            }
        }

        #[test]
        fn shift_invariance(row in row_strategy(), c in -100.0f64..100.0, tau in 0.5f64..20.0) {
            let a = softmax_tau(&LogitsBatch::from_rows(std::slice::from_ref(&row)).unwrap(), tau).unwrap();
            let shifted: Vec<f64> = row.iter().map(|x| x + c).collect();
            let b = softmax_tau(&LogitsBatch::from_rows(&[shifted]).unwrap(), tau).unwrap();
            for (x, y) in a.values().iter().zip(b.values().iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn kl_is_nonnegative(a in row_strategy(), seed in any::<u64>(), tau in 0.5f64..10.0) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * 0.5 + ((seed >> (i % 60)) & 7) as f64 - 3.0).collect();
            let pa = softmax_tau(&LogitsBatch::from_rows(&[a]).unwrap(), tau).unwrap();
            let pb = softmax_tau(&LogitsBatch::from_rows(&[b]).unwrap(), tau).unwrap();
            prop_assert!(kl_divergence(&pa, &pb).unwrap()[0] >= 0.0);
            prop_assert_eq!(kl_divergence(&pa, &pa).unwrap()[0], 0.0);
        }
    }
}
