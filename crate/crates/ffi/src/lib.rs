//! C interface to the distillation core.
//!
//! Every fallible function returns a [`KdStatus`]. On failure a message is
//! stored per thread and can be read with [`kd_last_error_message`]. Matrices
//! are dense row-major `double` arrays; labels are `size_t` class indices.
//! Networks and logit files are exposed as opaque handles that must be freed
//! with their matching `*_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use kd_toolkit::adjustment::AdjustmentMode;
use kd_toolkit::analysis::genetic_errors;
use kd_toolkit::data::{load_teacher_logits, predict_logits};
use kd_toolkit::loss::{loss_and_grad, DistillSpec};
use kd_toolkit::nn::{checkpoint, NetworkParams};
use kd_toolkit::soft_targets::{softmax_tau, LabelVector, LogitsBatch};
use kd_toolkit::temperature::{DtdConfig, WeightScheme};
use kd_toolkit::KdError;
use ndarray::{ArrayView2, ShapeBuilder};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdStatus {
    Ok = 0,
    InvalidArgument = 1,
    ShapeMismatch = 2,
    Config = 3,
    Corrupt = 4,
    Numerical = 5,
    Io = 6,
    NullPointer = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdSpecKind {
    Kd = 0,
    Ka = 1,
    Dtd = 2,
    DtdKa = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdAdjust {
    None = 0,
    Lsr = 1,
    ProbabilityShift = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdWeights {
    Flsw = 0,
    Cwsm = 1,
}

/// Loss selection. Fields a given `kind` does not use are ignored.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct KdLossSpec {
    pub kind: KdSpecKind,
    /// Fixed temperature (KD, KA).
    pub tau: f64,
    /// Weight of the soft term (KD, DTD).
    pub alpha: f64,
    /// Target adjustment (KA, DTD-KA).
    pub adjust: KdAdjust,
    /// LSR smoothing strength.
    pub epsilon: f64,
    /// Sample weighting (DTD, DTD-KA).
    pub weights: KdWeights,
    pub gamma: f64,
    pub tau0: f64,
    pub beta: f64,
    pub tau_min: f64,
}

/// Opaque network handle.
pub struct KdNetwork {
    params: NetworkParams,
}

/// Opaque logit matrix handle.
pub struct KdLogits {
    logits: LogitsBatch,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &KdError) -> KdStatus {
    match err {
        KdError::InvalidArgument(_) => KdStatus::InvalidArgument,
        KdError::ShapeMismatch(_) => KdStatus::ShapeMismatch,
        KdError::Config(_) => KdStatus::Config,
        KdError::Corrupt { .. } => KdStatus::Corrupt,
        KdError::Numerical { .. } => KdStatus::Numerical,
        KdError::Io(_) => KdStatus::Io,
    }
}

enum Failure {
    Kd(KdError),
    Null(&'static str),
}

impl From<KdError> for Failure {
    fn from(e: KdError) -> Self {
        Failure::Kd(e)
    }
}

/// Runs `f`, records any error, and converts panics into `KdStatus::Panic`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KdStatus::Ok,
        Ok(Err(Failure::Kd(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            KdStatus::NullPointer
        }
        Err(_) => {
            set_error("internal panic".into());
            KdStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(p)
    }
}

unsafe fn matrix<'a>(p: *const f64, n: usize, k: usize, what: &'static str) -> Result<ArrayView2<'a, f64>, Failure> {
    let p = non_null(p, what)?;
    let len = n.checked_mul(k).ok_or_else(|| Failure::Kd(KdError::InvalidArgument(format!("{what}: size overflow"))))?;
    let slice = std::slice::from_raw_parts(p, len);
    Ok(ArrayView2::from_shape((n, k).strides((k, 1)), slice).expect("length matches shape"))
}

unsafe fn logits(p: *const f64, n: usize, k: usize, what: &'static str) -> Result<LogitsBatch, Failure> {
    Ok(LogitsBatch::new(matrix(p, n, k, what)?.to_owned())?)
}

unsafe fn labels(p: *const usize, n: usize, k: usize) -> Result<LabelVector, Failure> {
    let p = non_null(p, "labels")?;
    Ok(LabelVector::new(std::slice::from_raw_parts(p, n).to_vec(), k)?)
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Failure> {
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    let p = non_null(p, "path")?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Kd(KdError::InvalidArgument("path is not valid UTF-8".into())))?;
    Ok(PathBuf::from(s))
}

fn to_spec(s: &KdLossSpec) -> DistillSpec {
    let adjust = match s.adjust {
        KdAdjust::None => AdjustmentMode::None,
        KdAdjust::Lsr => AdjustmentMode::Lsr { epsilon: s.epsilon },
        KdAdjust::ProbabilityShift => AdjustmentMode::ProbabilityShift,
    };
    let cfg = DtdConfig {
        scheme: match s.weights {
            KdWeights::Flsw => WeightScheme::Flsw { gamma: s.gamma },
            KdWeights::Cwsm => WeightScheme::Cwsm,
        },
        tau0: s.tau0,
        beta: s.beta,
        tau_min: s.tau_min,
    };
    match s.kind {
        KdSpecKind::Kd => DistillSpec::Kd { tau: s.tau, alpha: s.alpha },
        KdSpecKind::Ka => DistillSpec::Ka { tau: s.tau, adjust },
        KdSpecKind::Dtd => DistillSpec::Dtd { cfg, alpha: s.alpha },
        KdSpecKind::DtdKa => DistillSpec::DtdKa { cfg, adjust },
    }
}

/// Message for the last failed call on this thread. Valid until the next
/// failing call on the same thread. Empty if nothing failed yet.
#[no_mangle]
pub extern "C" fn kd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `softmax(logits / tau)` row by row into `out` (`n × k`).
#[no_mangle]
pub unsafe extern "C" fn kd_softmax_tau(logits_ptr: *const f64, n: usize, k: usize, tau: f64, out: *mut f64) -> KdStatus {
    guard(|| {
        let l = logits(logits_ptr, n, k, "logits")?;
        let q = softmax_tau(&l, tau)?;
        let dst = out_slice(out, n * k, "out")?;
        for (d, s) in dst.iter_mut().zip(q.values().iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Summed batch loss and, if `grad_out` is non-null, its gradient with respect
/// to the student logits (`n × k`).
#[no_mangle]
pub unsafe extern "C" fn kd_loss_and_grad(
    spec: *const KdLossSpec,
    student: *const f64,
    teacher: *const f64,
    labels_ptr: *const usize,
    n: usize,
    k: usize,
    loss_out: *mut f64,
    grad_out: *mut f64,
) -> KdStatus {
    guard(|| {
        let spec = to_spec(&*non_null(spec, "spec")?);
        let v = logits(student, n, k, "student")?;
        let t = logits(teacher, n, k, "teacher")?;
        let y = labels(labels_ptr, n, k)?;
        non_null(loss_out, "loss_out")?;
        let (breakdown, grad) = loss_and_grad(&spec, &v, &t, &y)?;
        *loss_out = breakdown.total;
        if !grad_out.is_null() {
            let dst = out_slice(grad_out, n * k, "grad_out")?;
            for (d, s) in dst.iter_mut().zip(grad.iter()) {
                *d = *s;
            }
        }
        Ok(())
    })
}

/// Counts student errors and those that repeat the teacher's prediction.
#[no_mangle]
pub unsafe extern "C" fn kd_genetic_errors(
    student: *const f64,
    teacher: *const f64,
    labels_ptr: *const usize,
    n: usize,
    k: usize,
    genetic_out: *mut usize,
    total_out: *mut usize,
    ratio_out: *mut f64,
) -> KdStatus {
    guard(|| {
        let v = logits(student, n, k, "student")?;
        let t = logits(teacher, n, k, "teacher")?;
        let y = labels(labels_ptr, n, k)?;
        non_null(genetic_out, "genetic_out")?;
        non_null(total_out, "total_out")?;
        non_null(ratio_out, "ratio_out")?;
        let ge = genetic_errors(&v, &t, &y)?;
        *genetic_out = ge.genetic;
        *total_out = ge.total;
        *ratio_out = ge.ratio;
        Ok(())
    })
}

/// Loads a network checkpoint. On success `*out` owns a new handle.
#[no_mangle]
pub unsafe extern "C" fn kd_network_load(path: *const c_char, out: *mut *mut KdNetwork) -> KdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let params = checkpoint::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(KdNetwork { params }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_network_input_dim(net: *const KdNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.params.input_dim())
}

#[no_mangle]
pub unsafe extern "C" fn kd_network_output_dim(net: *const KdNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.params.output_dim())
}

/// Logits for `n` inputs of width `d` into `out` (`n × output_dim`).
#[no_mangle]
pub unsafe extern "C" fn kd_network_forward(
    net: *const KdNetwork,
    inputs: *const f64,
    n: usize,
    d: usize,
    out: *mut f64,
) -> KdStatus {
    guard(|| {
        let net = &*non_null(net, "network")?;
        let x = matrix(inputs, n, d, "inputs")?;
        let l = predict_logits(&net.params, x)?;
        let dst = out_slice(out, n * net.params.output_dim(), "out")?;
        for (dv, s) in dst.iter_mut().zip(l.values().iter()) {
            *dv = *s;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_network_free(net: *mut KdNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Loads a teacher-logit file. On success `*out` owns a new handle.
#[no_mangle]
pub unsafe extern "C" fn kd_logits_load(path: *const c_char, out: *mut *mut KdLogits) -> KdStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let logits = load_teacher_logits(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(KdLogits { logits }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_logits_rows(l: *const KdLogits) -> usize {
    l.as_ref().map_or(0, |l| l.logits.n())
}

#[no_mangle]
pub unsafe extern "C" fn kd_logits_cols(l: *const KdLogits) -> usize {
    l.as_ref().map_or(0, |l| l.logits.k())
}

/// Copies the matrix into `out`, which must hold `len >= rows × cols` values.
#[no_mangle]
pub unsafe extern "C" fn kd_logits_copy(l: *const KdLogits, out: *mut f64, len: usize) -> KdStatus {
    guard(|| {
        let l = &(*non_null(l, "logits")?).logits;
        let need = l.n() * l.k();
        if len < need {
            return Err(KdError::ShapeMismatch(format!("buffer holds {len} values, need {need}")).into());
        }
        let dst = out_slice(out, need, "out")?;
        for (d, s) in dst.iter_mut().zip(l.values().iter()) {
            *d = *s;
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn kd_logits_free(l: *mut KdLogits) {
    if !l.is_null() {
        drop(Box::from_raw(l));
    }
}
