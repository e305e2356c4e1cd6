//! Per-sample confusion weights and the temperatures derived from them.
//!
//! A sample's weight grows when the student finds it confusing. Weights are
//! L1-normalized over the batch and mapped to
//! `τ_x = τ₀ + (mean(ω) − ω_x)·β`, clamped below at `tau_min`, so confusing
//! samples get sharper (lower-temperature) targets.

use ndarray::{Array1, ArrayView1};

use crate::error::{invalid, shape, Result};
use crate::soft_targets::{argmax_view, log_softmax_into, LogitsBatch};

pub const DEFAULT_TAU0: f64 = 10.0;
pub const DEFAULT_BETA: f64 = 40.0;
pub const DEFAULT_TAU_MIN: f64 = 3.0;
pub const DEFAULT_GAMMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeights {
    omega: Vec<f64>,
    normalized: bool,
}

impl SampleWeights {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if omega.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("sample weights must be finite and nonnegative"));
        }
        Ok(Self { omega, normalized: false })
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }
}

/// Clamped per-sample temperatures.
#[derive(Debug, Clone, PartialEq)]
pub struct TauVector {
    tau: Vec<f64>,
    clamped: Vec<bool>,
    pub tau0: f64,
    pub beta: f64,
    pub tau_min: f64,
}

impl TauVector {
    /// The same temperature for `n` samples.
    pub fn constant(tau: f64, n: usize) -> Self {
        Self {
            tau: vec![tau; n],
            clamped: vec![false; n],
            tau0: tau,
            beta: 0.0,
            tau_min: tau,
        }
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    /// `true` where the raw value fell below `tau_min`.
    pub fn clamped(&self) -> &[bool] {
        &self.clamped
    }

    pub fn stats(&self) -> TauStats {
        TauStats::of(&self.tau, &self.clamped)
    }
}

/// Batch summary of the temperatures in use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    pub clamped_count: usize,
}

impl TauStats {
    pub fn of(tau: &[f64], clamped: &[bool]) -> Self {
        let n = tau.len().max(1) as f64;
        Self {
            min: tau.iter().copied().fold(f64::INFINITY, f64::min),
            mean: tau.iter().sum::<f64>() / n,
            max: tau.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            clamped_count: clamped.iter().filter(|&&c| c).count(),
        }
    }

    pub fn fixed(tau: f64) -> Self {
        Self { min: tau, mean: tau, max: tau, clamped_count: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightScheme {
    /// Focal-loss style: `(1 − v̂·t̂)^γ` on L2-normalized logit rows.
    Flsw { gamma: f64 },
    /// Inverse of the student's top softmax probability.
    Cwsm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtdConfig {
    pub scheme: WeightScheme,
    pub tau0: f64,
    pub beta: f64,
    pub tau_min: f64,
}

impl Default for DtdConfig {
    fn default() -> Self {
        Self {
            scheme: WeightScheme::Flsw { gamma: DEFAULT_GAMMA },
            tau0: DEFAULT_TAU0,
            beta: DEFAULT_BETA,
            tau_min: DEFAULT_TAU_MIN,
        }
    }
}

impl DtdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau0 > self.tau_min) || !self.tau0.is_finite() {
            return Err(invalid(format!(
                "need tau0 > tau_min > 0, got tau0={} tau_min={}",
                self.tau0, self.tau_min
            )));
        }
        if !self.beta.is_finite() {
            return Err(invalid("beta must be finite"));
        }
        if let WeightScheme::Flsw { gamma } = self.scheme {
            check_gamma(gamma)?;
        }
        Ok(())
    }

    /// Normalized weights and temperatures for the current student logits.
    pub fn temperatures(&self, v: &LogitsBatch, t: &LogitsBatch) -> Result<(SampleWeights, TauVector)> {
        let raw = match self.scheme {
            WeightScheme::Flsw { gamma } => weights_flsw(v, t, gamma)?,
            WeightScheme::Cwsm => weights_cwsm(v),
        };
        let w = normalize_l1(&raw);
        let tau = tau_per_sample(&w, self.tau0, self.beta, self.tau_min)?;
        Ok((w, tau))
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(invalid(format!("gamma must be finite and nonnegative, got {gamma}")));
    }
    Ok(())
}

/// Cosine similarity of two rows and its gradient with respect to `v`.
pub(crate) fn cosine_with_grad(v: ArrayView1<'_, f64>, t: ArrayView1<'_, f64>) -> Result<(f64, Array1<f64>)> {
    let nv = v.dot(&v).sqrt();
    let nt = t.dot(&t).sqrt();
    if nv == 0.0 || nt == 0.0 {
        return Err(invalid("zero-norm logits row has no direction"));
    }
    let mut c = (v.dot(&t) / (nv * nt)).clamp(-1.0, 1.0);
    // parallel rows: snap rounding noise so the weight is exactly zero
    if 1.0 - c <= 8.0 * f64::EPSILON {
        c = 1.0;
    }
    let grad = t.mapv(|x| x / (nt * nv)) - v.mapv(|x| c * x / (nv * nv));
    Ok((c, grad))
}

/// `(1 − c)^γ` and its derivative with respect to `c`.
pub(crate) fn focal_weight(c: f64, gamma: f64) -> (f64, f64) {
    let base = 1.0 - c;
    if gamma == 0.0 {
        return (1.0, 0.0);
    }
    let w = base.powf(gamma);
    let dw_dc = if base == 0.0 {
        if gamma > 1.0 { 0.0 } else if gamma == 1.0 { -1.0 } else { f64::NEG_INFINITY }
    } else {
        -gamma * base.powf(gamma - 1.0)
    };
    (w, dw_dc)
}

/// FLSW weights `(1 − v̂·t̂)^γ`; each lies in `[0, 2^γ]`.
pub fn weights_flsw(v: &LogitsBatch, t: &LogitsBatch, gamma: f64) -> Result<SampleWeights> {
    check_gamma(gamma)?;
    if v.values().dim() != t.values().dim() {
        return Err(shape(format!("student {:?} vs teacher {:?}", v.values().dim(), t.values().dim())));
    }
    let mut omega = Vec::with_capacity(v.n());
    for i in 0..v.n() {
        let (c, _) = cosine_with_grad(v.row(i), t.row(i))?;
        omega.push(focal_weight(c, gamma).0);
    }
    Ok(SampleWeights { omega, normalized: false })
}

/// Top softmax probability of a row and its gradient with respect to the row.
pub(crate) fn top_prob_with_grad(v: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
    let mut lp = vec![0.0; v.len()];
    log_softmax_into(v, 1.0, &mut lp);
    let top = argmax_view(v);
    let m = lp[top].exp();
    let mut grad: Array1<f64> = lp.iter().map(|&l| -m * l.exp()).collect();
    grad[top] += m;
    (m, grad)
}

/// CWSM weights `1 / max softmax(v)`; each lies in `[1, K]`.
pub fn weights_cwsm(v: &LogitsBatch) -> SampleWeights {
    let omega = (0..v.n()).map(|i| 1.0 / top_prob_with_grad(v.row(i)).0).collect();
    SampleWeights { omega, normalized: false }
}

/// Divides by the sum. An all-zero vector becomes uniform.
pub fn normalize_l1(w: &SampleWeights) -> SampleWeights {
    let n = w.omega.len();
    let sum: f64 = w.omega.iter().sum();
    let omega = if sum > 0.0 {
        w.omega.iter().map(|x| x / sum).collect()
    } else {
        vec![1.0 / n as f64; n]
    };
    SampleWeights { omega, normalized: true }
}

/// `τ_x = tau0 + (1/N − ω_x)·beta`, clamped below at `tau_min`.
pub fn tau_per_sample(w: &SampleWeights, tau0: f64, beta: f64, tau_min: f64) -> Result<TauVector> {
    if !w.normalized {
        return Err(invalid("temperatures need L1-normalized weights"));
    }
    if !(tau_min > 0.0) {
        return Err(invalid(format!("tau_min must be positive, got {tau_min}")));
    }
    // normalized weights average exactly 1/N
    let mean = 1.0 / w.omega.len() as f64;
    let mut tau = Vec::with_capacity(w.len());
    let mut clamped = Vec::with_capacity(w.len());
    for &wx in &w.omega {
        let raw = tau0 + (mean - wx) * beta;
        clamped.push(raw < tau_min);
        tau.push(raw.max(tau_min));
    }
    Ok(TauVector { tau, clamped, tau0, beta, tau_min })
}
