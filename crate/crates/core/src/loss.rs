//! Batch distillation losses and their exact gradients with respect to the
//! student logits.
//!
//! All four objectives share one shape. For sample `i` with temperature `τ_i`:
//!
//! ```text
//! L_i = c_kl · τ_i² · KL(A(q_{τ_i}), p_{τ_i}) + c_ce · H(y_i, p_1)
//! ```
//!
//! | spec   | τ_i           | A        | c_kl | c_ce  |
//! |--------|---------------|----------|------|-------|
//! | KD     | fixed τ       | identity | α    | 1 − α |
//! | KA     | fixed τ       | LSR / PS | 1    | 0     |
//! | DTD    | from weights  | identity | α    | 1 − α |
//! | DTD-KA | from weights  | LSR / PS | 1    | 0     |
//!
//! The batch loss is the SUM of `L_i`. With dynamic temperatures the
//! gradient includes the path `v → ω → ω̂ → τ`, including the coupling
//! between samples introduced by L1 normalization. The adjustment (which rows
//! are repaired, and where values are swapped) depends only on the teacher
//! logits and is held fixed; clamped temperatures contribute no gradient.

use ndarray::{Array1, Array2, ArrayView1};

use crate::adjustment::{find_misjudged, AdjustmentMode, AdjustmentReport};
use crate::error::{invalid, shape, Result};
use crate::soft_targets::{argmax_view, log_softmax_into, LabelVector, LogitsBatch};
use crate::temperature::{
    cosine_with_grad, focal_weight, normalize_l1, tau_per_sample, top_prob_with_grad, DtdConfig, SampleWeights,
    TauStats, WeightScheme,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistillSpec {
    Kd { tau: f64, alpha: f64 },
    Ka { tau: f64, adjust: AdjustmentMode },
    Dtd { cfg: DtdConfig, alpha: f64 },
    DtdKa { cfg: DtdConfig, adjust: AdjustmentMode },
}

impl DistillSpec {
    pub fn validate(&self) -> Result<()> {
        let check_tau = |tau: f64| {
            if tau > 0.0 && tau.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("temperature must be positive, got {tau}")))
            }
        };
        let check_alpha = |alpha: f64| {
            if (0.0..=1.0).contains(&alpha) {
                Ok(())
            } else {
                Err(invalid(format!("alpha must lie in [0, 1], got {alpha}")))
            }
        };
        match *self {
            DistillSpec::Kd { tau, alpha } => {
                check_tau(tau)?;
                check_alpha(alpha)
            }
            DistillSpec::Ka { tau, adjust } => {
                check_tau(tau)?;
                adjust.validate()
            }
            DistillSpec::Dtd { cfg, alpha } => {
                cfg.validate()?;
                check_alpha(alpha)
            }
            DistillSpec::DtdKa { cfg, adjust } => {
                cfg.validate()?;
                adjust.validate()
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistillSpec::Kd { .. } => "kd",
            DistillSpec::Ka { .. } => "ka",
            DistillSpec::Dtd { .. } => "dtd",
            DistillSpec::DtdKa { .. } => "dtd-ka",
        }
    }

    fn plan(&self) -> Plan {
        match *self {
            DistillSpec::Kd { tau, alpha } => Plan {
                temps: Temps::Fixed(tau),
                adjust: AdjustmentMode::None,
                kl_weight: alpha,
                ce_weight: 1.0 - alpha,
            },
            DistillSpec::Ka { tau, adjust } => Plan {
                temps: Temps::Fixed(tau),
                adjust,
                kl_weight: 1.0,
                ce_weight: 0.0,
            },
            DistillSpec::Dtd { cfg, alpha } => Plan {
                temps: Temps::Dynamic(cfg),
                adjust: AdjustmentMode::None,
                kl_weight: alpha,
                ce_weight: 1.0 - alpha,
            },
            DistillSpec::DtdKa { cfg, adjust } => Plan {
                temps: Temps::Dynamic(cfg),
                adjust,
                kl_weight: 1.0,
                ce_weight: 0.0,
            },
        }
    }
}

/// Loss value with its parts, one record per training step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Sum of `per_sample` plus `auxiliary`.
    pub total: f64,
    pub per_sample: Vec<f64>,
    pub kl_part: f64,
    pub ce_part: f64,
    /// Externally supplied extra term (zero unless one was added).
    pub auxiliary: f64,
    pub tau_stats: TauStats,
    pub adjustment: AdjustmentReport,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "total,kl_part,ce_part,auxiliary,tau_min,tau_mean,tau_max,clamped_count,misjudged_count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.total,
            self.kl_part,
            self.ce_part,
            self.auxiliary,
            self.tau_stats.min,
            self.tau_stats.mean,
            self.tau_stats.max,
            self.tau_stats.clamped_count,
            self.adjustment.misjudged_count()
        )
    }
}

/// An extra scalar term with its gradient on the student logits, computed
/// outside this module (for example a feature-transfer loss).
#[derive(Debug, Clone)]
pub struct AuxiliaryTerm {
    pub value: f64,
    pub grad: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Temps {
    Fixed(f64),
    Dynamic(DtdConfig),
}

#[derive(Debug, Clone, Copy)]
struct Plan {
    temps: Temps,
    adjust: AdjustmentMode,
    kl_weight: f64,
    ce_weight: f64,
}

/// Temperatures plus what is needed to differentiate through them.
struct TempState {
    tau: Vec<f64>,
    clamped: Vec<bool>,
    // normalized weights, their pre-normalization sum, and dω_i/dv_i rows;
    // None for fixed temperatures or when the weights fell back to uniform
    coupling: Option<Coupling>,
}

struct Coupling {
    beta: f64,
    w_hat: Vec<f64>,
    sum: f64,
    dw: Vec<Array1<f64>>,
}

fn temperatures(temps: Temps, v: &LogitsBatch, t: &LogitsBatch) -> Result<TempState> {
    let n = v.n();
    let cfg = match temps {
        Temps::Fixed(tau) => {
            return Ok(TempState {
                tau: vec![tau; n],
                clamped: vec![false; n],
                coupling: None,
            })
        }
        Temps::Dynamic(cfg) => cfg,
    };
    let mut raw = Vec::with_capacity(n);
    let mut dw = Vec::with_capacity(n);
    for i in 0..n {
        match cfg.scheme {
            WeightScheme::Flsw { gamma } => {
                let (c, dc) = cosine_with_grad(v.row(i), t.row(i))?;
                let (w, dw_dc) = focal_weight(c, gamma);
                raw.push(w);
                dw.push(if dw_dc == 0.0 { Array1::zeros(v.k()) } else { dc * dw_dc });
            }
            WeightScheme::Cwsm => {
                let (m, dm) = top_prob_with_grad(v.row(i));
                raw.push(1.0 / m);
                dw.push(dm * (-1.0 / (m * m)));
            }
        }
    }
    let sum: f64 = raw.iter().sum();
    let w_hat = normalize_l1(&SampleWeights::new(raw)?);
    let tau = tau_per_sample(&w_hat, cfg.tau0, cfg.beta, cfg.tau_min)?;
    let coupling = (sum > 0.0 && cfg.beta != 0.0).then(|| Coupling {
        beta: cfg.beta,
        w_hat: w_hat.omega().to_vec(),
        sum,
        dw,
    });
    Ok(TempState {
        tau: tau.tau().to_vec(),
        clamped: tau.clamped().to_vec(),
        coupling,
    })
}

fn check_inputs(v: &LogitsBatch, t: &LogitsBatch, y: &LabelVector) -> Result<()> {
    if v.values().dim() != t.values().dim() {
        return Err(shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            v.values().dim(),
            t.values().dim()
        )));
    }
    y.check_against(v.n(), v.k())
}

fn run(plan: Plan, v: &LogitsBatch, t: &LogitsBatch, y: &LabelVector, want_grad: bool) -> Result<(LossBreakdown, Option<Array2<f64>>)> {
    check_inputs(v, t, y)?;
    plan.adjust.validate()?;
    let (n, k) = v.values().dim();

    let (mask, mut report) = find_misjudged(t, y)?;
    report.mode = Some(plan.adjust);
    let temps = temperatures(plan.temps, v, t)?;

    let mut grad = want_grad.then(|| Array2::<f64>::zeros((n, k)));
    let mut dl_dtau = vec![0.0; n];
    let mut per_sample = Vec::with_capacity(n);
    let (mut kl_part, mut ce_part) = (0.0, 0.0);

    let mut lp = vec![0.0; k];
    let mut lq = vec![0.0; k];
    let mut a = vec![0.0; k];
    let mut la = vec![0.0; k];
    // for each target entry, the teacher class it came from
    let mut src: Vec<usize> = Vec::with_capacity(k);

    for i in 0..n {
        let tau = temps.tau[i];
        let vi = v.row(i);
        let ti = t.row(i);
        let label = y.get(i);
        log_softmax_into(vi, tau, &mut lp);
        log_softmax_into(ti, tau, &mut lq);

        src.clear();
        src.extend(0..k);
        let lsr = match plan.adjust {
            AdjustmentMode::Lsr { epsilon } if mask[i] => Some(epsilon),
            AdjustmentMode::ProbabilityShift if mask[i] => {
                src.swap(argmax_view(ti), label);
                None
            }
            _ => None,
        };
        match lsr {
            Some(eps) => {
                let off = eps / k as f64;
                for j in 0..k {
                    a[j] = if j == label { 1.0 - eps + off } else { off };
                    la[j] = a[j].ln();
                }
            }
            None => {
                for j in 0..k {
                    la[j] = lq[src[j]];
                    a[j] = la[j].exp();
                }
            }
        }

        let kl = kl_row(&a, &la, &lp, lsr.is_none().then_some((vi, ti, &src[..])), tau).max(0.0);
        let soft = plan.kl_weight * tau * tau * kl;

        let mut ce = 0.0;
        let mut lp1 = Vec::new();
        if plan.ce_weight > 0.0 {
            lp1 = vec![0.0; k];
            log_softmax_into(vi, 1.0, &mut lp1);
            ce = -lp1[label];
        }
        let hard = plan.ce_weight * ce;
        kl_part += soft;
        ce_part += hard;
        per_sample.push(soft + hard);

        if let Some(g) = grad.as_mut() {
            let mut row = g.row_mut(i);
            for j in 0..k {
                row[j] = plan.kl_weight * tau * (lp[j].exp() - a[j]);
            }
            if plan.ce_weight > 0.0 {
                for j in 0..k {
                    row[j] += plan.ce_weight * lp1[j].exp();
                }
                row[label] -= plan.ce_weight;
            }
            if temps.coupling.is_some() && !temps.clamped[i] {
                // d ln p_j / dτ = −(v_j − E_p[v]) / τ²
                let ev: f64 = (0..k).map(|j| lp[j].exp() * vi[j]).sum();
                let et: f64 = (0..k).map(|j| lq[j].exp() * ti[j]).sum();
                let mut dkl = 0.0;
                for j in 0..k {
                    dkl += a[j] * (vi[j] - ev);
                    if lsr.is_none() && a[j] > 0.0 {
                        let da = -a[j] * (ti[src[j]] - et);
                        dkl += da * (la[j] - lp[j]);
                    }
                }
                dkl /= tau * tau;
                dl_dtau[i] = plan.kl_weight * (2.0 * tau * kl + tau * tau * dkl);
            }
        }
    }

    if let (Some(g), Some(c)) = (grad.as_mut(), temps.coupling.as_ref()) {
        // τ_i = τ₀ + (1/N − ω̂_i)β,  ∂ω̂_i/∂ω_j = (δ_ij − ω̂_i)/S
        let weighted: f64 = dl_dtau.iter().zip(&c.w_hat).map(|(g, w)| g * w).sum();
        for j in 0..n {
            let scale = -c.beta / c.sum * (dl_dtau[j] - weighted);
            if scale != 0.0 {
                g.row_mut(j).scaled_add(scale, &c.dw[j]);
            }
        }
    }

    let total = per_sample.iter().sum();
    let breakdown = LossBreakdown {
        total,
        per_sample,
        kl_part,
        ce_part,
        auxiliary: 0.0,
        tau_stats: TauStats::of(&temps.tau, &temps.clamped),
        adjustment: report,
    };
    Ok((breakdown, grad))
}

/// `KL(a ‖ p)` for one row, summed as `Σ a_j ψ(d_j)` with `d_j = ln a_j − ln p_j`
/// and `ψ(d) = d + e^{−d} − 1 ≥ 0`. This equals `Σ a_j d_j` because `Σ a_j e^{−d_j}
/// = Σ p_j = 1`, but has no cancellation between terms, and an error shared by
/// every `d_j` (from either log-normalizer) drops out to first order. When the
/// target is a permuted teacher softmax, `d_j` is rebuilt from the logits as
/// `(t_src − v)/τ + ln(S_v/S_t)`.
fn kl_row(a: &[f64], la: &[f64], lp: &[f64], logits: Option<(ArrayView1<'_, f64>, ArrayView1<'_, f64>, &[usize])>, tau: f64) -> f64 {
    let Some((v, t, src)) = logits else {
        return (0..a.len()).filter(|&j| a[j] > 0.0).map(|j| a[j] * psi(la[j] - lp[j])).sum();
    };
    let (mv, sv) = shifted_exp_sum(v, tau);
    let (mt, st) = shifted_exp_sum(t, tau);
    let log_ratio = (sv / st).ln();
    (0..a.len())
        .filter(|&j| a[j] > 0.0)
        .map(|j| a[j] * psi(((t[src[j]] - mt) - (v[j] - mv)) / tau + log_ratio))
        .sum()
}

/// `d + e^{−d} − 1`, accurate near zero.
fn psi(d: f64) -> f64 {
    if d.abs() > 0.5 {
        return d + (-d).exp_m1();
    }
    // d²/2! − d³/3! + d⁴/4! − …
    let mut term = d * d / 2.0;
    let mut sum = 0.0f64;
    let mut n = 2.0;
    while term.abs() > f64::EPSILON * 1e-3 * sum.abs() && n < 40.0 {
        sum += term;
        n += 1.0;
        term *= -d / n;
    }
    sum
}

/// Row maximum and `Σ exp((z − max)/τ)`.
fn shifted_exp_sum(z: ArrayView1<'_, f64>, tau: f64) -> (f64, f64) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (m, z.iter().map(|x| ((x - m) / tau).exp()).sum())
}

/// Classical KD: `Σ α τ² KL(q_τ, p_τ) + (1 − α) H(y, p_1)`.
pub fn loss_kd(v: &LogitsBatch, t: &LogitsBatch, y: &LabelVector, tau: f64, alpha: f64) -> Result<LossBreakdown> {
    evaluate(&DistillSpec::Kd { tau, alpha }, v, t, y)
}

/// Knowledge adjustment: `Σ τ² KL(A(q_τ), p_τ)`, no ground-truth term.
pub fn loss_ka(v: &LogitsBatch, t: &LogitsBatch, y: &LabelVector, tau: f64, adjust: AdjustmentMode) -> Result<LossBreakdown> {
    evaluate(&DistillSpec::Ka { tau, adjust }, v, t, y)
}

/// Dynamic temperature: `Σ α τ_x² KL(q_{τ_x}, p_{τ_x}) + (1 − α) H(y, p_1)`.
pub fn loss_dtd(v: &LogitsBatch, t: &LogitsBatch, y: &LabelVector, cfg: DtdConfig, alpha: f64) -> Result<LossBreakdown> {
    evaluate(&DistillSpec::Dtd { cfg, alpha }, v, t, y)
}

/// Combined objective: weights, per-sample temperatures, soften both sides,
/// repair misjudged targets, then `Σ τ_x² KL(A(q_{τ_x}), p_{τ_x})`.
pub fn loss_total(v: &LogitsBatch, t: &LogitsBatch, y: &LabelVector, cfg: DtdConfig, adjust: AdjustmentMode) -> Result<LossBreakdown> {
    evaluate(&DistillSpec::DtdKa { cfg, adjust }, v, t, y)
}

pub fn evaluate(spec: &DistillSpec, v: &LogitsBatch, t: &LogitsBatch, y: &LabelVector) -> Result<LossBreakdown> {
    spec.validate()?;
    Ok(run(spec.plan(), v, t, y, false)?.0)
}

/// Gradient of the summed loss with respect to every student logit.
pub fn grad_student_logits(spec: &DistillSpec, v: &LogitsBatch, t: &LogitsBatch, y: &LabelVector) -> Result<Array2<f64>> {
    Ok(loss_and_grad(spec, v, t, y)?.1)
}

pub fn loss_and_grad(spec: &DistillSpec, v: &LogitsBatch, t: &LogitsBatch, y: &LabelVector) -> Result<(LossBreakdown, Array2<f64>)> {
    loss_and_grad_with_aux(spec, v, t, y, None)
}

/// Like [`loss_and_grad`], folding in an externally computed term.
pub fn loss_and_grad_with_aux(
    spec: &DistillSpec,
    v: &LogitsBatch,
    t: &LogitsBatch,
    y: &LabelVector,
    aux: Option<&AuxiliaryTerm>,
) -> Result<(LossBreakdown, Array2<f64>)> {
    spec.validate()?;
    let (mut breakdown, grad) = run(spec.plan(), v, t, y, true)?;
    let mut grad = grad.expect("gradient requested");
    if let Some(aux) = aux {
        if aux.grad.dim() != grad.dim() {
            return Err(shape(format!("auxiliary gradient {:?} vs logits {:?}", aux.grad.dim(), grad.dim())));
        }
        breakdown.auxiliary = aux.value;
        breakdown.total += aux.value;
        grad += &aux.grad;
    }
    Ok((breakdown, grad))
}

/// Plain cross entropy with the labels, summed; used when there is no teacher.
pub fn loss_ce(v: &LogitsBatch, y: &LabelVector) -> Result<(LossBreakdown, Array2<f64>)> {
    y.check_against(v.n(), v.k())?;
    let (n, k) = v.values().dim();
    let mut grad = Array2::zeros((n, k));
    let mut per_sample = Vec::with_capacity(n);
    let mut lp = vec![0.0; k];
    for i in 0..n {
        log_softmax_into(v.row(i), 1.0, &mut lp);
        let label = y.get(i);
        per_sample.push(-lp[label]);
        let mut row = grad.row_mut(i);
        for j in 0..k {
            row[j] = lp[j].exp();
        }
        row[label] -= 1.0;
    }
    let total: f64 = per_sample.iter().sum();
    let breakdown = LossBreakdown {
        total,
        per_sample,
        kl_part: 0.0,
        ce_part: total,
        auxiliary: 0.0,
        tau_stats: TauStats::fixed(1.0),
        adjustment: AdjustmentReport::default(),
    };
    Ok((breakdown, grad))
}
