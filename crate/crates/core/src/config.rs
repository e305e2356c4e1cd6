//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! seed = 1
//! train.lr0 = 0.003
//! dtd.beta = 40
//! ```
//!
//! Keys carry a section prefix. Unknown keys are rejected by name. Command-line
//! flags are applied on top of the file through [`RunConfig::set`].

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adjustment::{AdjustmentMode, DEFAULT_EPSILON};
use crate::data::{Split, SyntheticParams};
use crate::error::{KdError, Result};
use crate::loss::DistillSpec;
use crate::nn::{LrSchedule, TrainConfig, TrainLoss};
use crate::temperature::{DtdConfig, WeightScheme, DEFAULT_BETA, DEFAULT_GAMMA, DEFAULT_TAU0, DEFAULT_TAU_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecKind {
    Ce,
    Kd,
    Ka,
    Dtd,
    DtdKa,
}

impl SpecKind {
    pub fn name(self) -> &'static str {
        match self {
            SpecKind::Ce => "ce",
            SpecKind::Kd => "kd",
            SpecKind::Ka => "ka",
            SpecKind::Dtd => "dtd",
            SpecKind::DtdKa => "dtd-ka",
        }
    }

    fn uses_adjustment(self) -> bool {
        matches!(self, SpecKind::Ka | SpecKind::DtdKa)
    }

    fn uses_dynamic_tau(self) -> bool {
        matches!(self, SpecKind::Dtd | SpecKind::DtdKa)
    }

    fn uses_alpha(self) -> bool {
        matches!(self, SpecKind::Kd | SpecKind::Dtd)
    }
}

impl FromStr for SpecKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ce" => Ok(SpecKind::Ce),
            "kd" => Ok(SpecKind::Kd),
            "ka" => Ok(SpecKind::Ka),
            "dtd" => Ok(SpecKind::Dtd),
            "dtd-ka" => Ok(SpecKind::DtdKa),
            _ => Err(format!("unknown spec '{s}' (expected ce, kd, ka, dtd or dtd-ka)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjustKind {
    None,
    Lsr,
    Ps,
}

impl AdjustKind {
    pub fn name(self) -> &'static str {
        match self {
            AdjustKind::None => "none",
            AdjustKind::Lsr => "lsr",
            AdjustKind::Ps => "ps",
        }
    }
}

impl FromStr for AdjustKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(AdjustKind::None),
            "lsr" => Ok(AdjustKind::Lsr),
            "ps" => Ok(AdjustKind::Ps),
            _ => Err(format!("unknown adjustment '{s}' (expected none, lsr or ps)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Flsw,
    Cwsm,
}

impl FromStr for WeightKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "flsw" => Ok(WeightKind::Flsw),
            "cwsm" => Ok(WeightKind::Cwsm),
            _ => Err(format!("unknown weight scheme '{s}' (expected flsw or cwsm)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Step,
}

impl FromStr for ScheduleKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "step" => Ok(ScheduleKind::Step),
            _ => Err(format!("unknown schedule '{s}' (expected cosine or step)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub data_k: usize,
    pub data_n_per_class: usize,
    pub data_d: usize,
    pub data_spread: f64,

    pub teacher_hidden: Vec<usize>,
    pub student_hidden: Vec<usize>,

    pub train_epochs: usize,
    pub train_batch_size: usize,
    pub train_lr0: f64,
    pub train_momentum: f64,
    pub train_weight_decay: f64,
    pub train_schedule: ScheduleKind,
    pub train_milestones: Vec<usize>,
    pub train_factor: f64,

    pub spec: SpecKind,
    pub alpha: f64,
    pub tau: f64,
    /// `None` resolves to PS for adjusting specs and to no adjustment otherwise.
    pub adjust: Option<AdjustKind>,
    pub epsilon: f64,
    pub baseline2: bool,

    pub weights: WeightKind,
    pub gamma: f64,
    pub tau0: f64,
    pub beta: f64,
    pub tau_min: f64,

    pub eval_split: Split,
    pub eval_thresholds: usize,

    pub paths_data: Option<PathBuf>,
    pub paths_out: Option<PathBuf>,
    pub paths_teacher: Option<PathBuf>,
    pub paths_teacher_logits: Option<PathBuf>,
    pub paths_student: Option<PathBuf>,
    pub paths_student_logits: Option<PathBuf>,

    /// Keys set since the last `clear_explicit`, used for flag-conflict checks.
    explicit: BTreeSet<&'static str>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = SyntheticParams::default();
        let train = TrainConfig::default();
        Self {
            seed: 1,
            data_k: data.k,
            data_n_per_class: data.n_per_class,
            data_d: data.d,
            data_spread: data.spread,
            teacher_hidden: vec![256, 256],
            student_hidden: vec![32],
            train_epochs: train.epochs,
            train_batch_size: train.batch_size,
            train_lr0: train.lr0,
            train_momentum: train.momentum,
            train_weight_decay: train.weight_decay,
            train_schedule: ScheduleKind::Cosine,
            train_milestones: vec![60, 120, 160],
            train_factor: 0.1,
            spec: SpecKind::Kd,
            alpha: 0.7,
            tau: 4.0,
            adjust: None,
            epsilon: DEFAULT_EPSILON,
            baseline2: false,
            weights: WeightKind::Flsw,
            gamma: DEFAULT_GAMMA,
            tau0: DEFAULT_TAU0,
            beta: DEFAULT_BETA,
            tau_min: DEFAULT_TAU_MIN,
            eval_split: Split::Val,
            eval_thresholds: 20,
            paths_data: None,
            paths_out: None,
            paths_teacher: None,
            paths_teacher_logits: None,
            paths_student: None,
            paths_student_logits: None,
            explicit: BTreeSet::new(),
        }
    }
}

/// Every accepted key, in the order `to_text` prints them.
pub const KEYS: &[&str] = &[
    "seed",
    "data.k",
    "data.n_per_class",
    "data.d",
    "data.spread",
    "teacher.hidden",
    "student.hidden",
    "train.epochs",
    "train.batch_size",
    "train.lr0",
    "train.momentum",
    "train.weight_decay",
    "train.schedule",
    "train.milestones",
    "train.factor",
    "distill.spec",
    "distill.alpha",
    "distill.tau",
    "distill.adjust",
    "distill.epsilon",
    "distill.baseline2",
    "dtd.weights",
    "dtd.gamma",
    "dtd.tau0",
    "dtd.beta",
    "dtd.tau_min",
    "eval.split",
    "eval.thresholds",
    "paths.data",
    "paths.out",
    "paths.teacher",
    "paths.teacher_logits",
    "paths.student",
    "paths.student_logits",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| KdError::Config(format!("{key}: cannot parse '{value}': {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(KdError::Config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(crate::error::io_at(path))?)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| KdError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let canonical = *KEYS
            .iter()
            .find(|&&k| k == key)
            .ok_or_else(|| KdError::Config(format!("unknown config key '{key}'")))?;
        match canonical {
            "seed" => self.seed = parse(key, value)?,
            "data.k" => self.data_k = parse(key, value)?,
            "data.n_per_class" => self.data_n_per_class = parse(key, value)?,
            "data.d" => self.data_d = parse(key, value)?,
            "data.spread" => self.data_spread = parse(key, value)?,
            "teacher.hidden" => self.teacher_hidden = parse_list(key, value)?,
            "student.hidden" => self.student_hidden = parse_list(key, value)?,
            "train.epochs" => self.train_epochs = parse(key, value)?,
            "train.batch_size" => self.train_batch_size = parse(key, value)?,
            "train.lr0" => self.train_lr0 = parse(key, value)?,
            "train.momentum" => self.train_momentum = parse(key, value)?,
            "train.weight_decay" => self.train_weight_decay = parse(key, value)?,
            "train.schedule" => self.train_schedule = parse(key, value)?,
            "train.milestones" => self.train_milestones = parse_list(key, value)?,
            "train.factor" => self.train_factor = parse(key, value)?,
            "distill.spec" => self.spec = parse(key, value)?,
            "distill.alpha" => self.alpha = parse(key, value)?,
            "distill.tau" => self.tau = parse(key, value)?,
            "distill.adjust" => self.adjust = Some(parse(key, value)?),
            "distill.epsilon" => self.epsilon = parse(key, value)?,
            "distill.baseline2" => self.baseline2 = parse_bool(key, value)?,
            "dtd.weights" => self.weights = parse(key, value)?,
            "dtd.gamma" => self.gamma = parse(key, value)?,
            "dtd.tau0" => self.tau0 = parse(key, value)?,
            "dtd.beta" => self.beta = parse(key, value)?,
            "dtd.tau_min" => self.tau_min = parse(key, value)?,
            "eval.split" => self.eval_split = Split::parse(value).map_err(|e| KdError::Config(format!("{key}: {e}")))?,
            "eval.thresholds" => self.eval_thresholds = parse(key, value)?,
            "paths.data" => self.paths_data = opt_path(value),
            "paths.out" => self.paths_out = opt_path(value),
            "paths.teacher" => self.paths_teacher = opt_path(value),
            "paths.teacher_logits" => self.paths_teacher_logits = opt_path(value),
            "paths.student" => self.paths_student = opt_path(value),
            "paths.student_logits" => self.paths_student_logits = opt_path(value),
            _ => unreachable!("every listed key is handled"),
        }
        self.explicit.insert(canonical);
        Ok(())
    }

    /// Forgets which keys were set so far; a loaded config file then acts
    /// as a new set of defaults rather than as explicit flags.
    pub fn clear_explicit(&mut self) {
        self.explicit.clear();
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "seed" => self.seed.to_string(),
            "data.k" => self.data_k.to_string(),
            "data.n_per_class" => self.data_n_per_class.to_string(),
            "data.d" => self.data_d.to_string(),
            "data.spread" => self.data_spread.to_string(),
            "teacher.hidden" => join(&self.teacher_hidden),
            "student.hidden" => join(&self.student_hidden),
            "train.epochs" => self.train_epochs.to_string(),
            "train.batch_size" => self.train_batch_size.to_string(),
            "train.lr0" => self.train_lr0.to_string(),
            "train.momentum" => self.train_momentum.to_string(),
            "train.weight_decay" => self.train_weight_decay.to_string(),
            "train.schedule" => match self.train_schedule {
                ScheduleKind::Cosine => "cosine".into(),
                ScheduleKind::Step => "step".into(),
            },
            "train.milestones" => join(&self.train_milestones),
            "train.factor" => self.train_factor.to_string(),
            "distill.spec" => self.spec.name().into(),
            "distill.alpha" => self.alpha.to_string(),
            "distill.tau" => self.tau.to_string(),
            "distill.adjust" => self.resolved_adjust().name().into(),
            "distill.epsilon" => self.epsilon.to_string(),
            "distill.baseline2" => self.baseline2.to_string(),
            "dtd.weights" => match self.weights {
                WeightKind::Flsw => "flsw".into(),
                WeightKind::Cwsm => "cwsm".into(),
            },
            "dtd.gamma" => self.gamma.to_string(),
            "dtd.tau0" => self.tau0.to_string(),
            "dtd.beta" => self.beta.to_string(),
            "dtd.tau_min" => self.tau_min.to_string(),
            "eval.split" => self.eval_split.name().into(),
            "eval.thresholds" => self.eval_thresholds.to_string(),
            "paths.data" => path_text(&self.paths_data),
            "paths.out" => path_text(&self.paths_out),
            "paths.teacher" => path_text(&self.paths_teacher),
            "paths.teacher_logits" => path_text(&self.paths_teacher_logits),
            "paths.student" => path_text(&self.paths_student),
            "paths.student_logits" => path_text(&self.paths_student_logits),
            _ => return None,
        };
        Some(v)
    }

    /// The fully resolved configuration, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).unwrap_or_default());
        }
        s
    }

    pub fn resolved_adjust(&self) -> AdjustKind {
        self.adjust.unwrap_or(if self.spec.uses_adjustment() { AdjustKind::Ps } else { AdjustKind::None })
    }

    pub fn synthetic_params(&self) -> SyntheticParams {
        SyntheticParams {
            n_per_class: self.data_n_per_class,
            k: self.data_k,
            d: self.data_d,
            spread: self.data_spread,
            seed: self.seed,
        }
    }

    pub fn adjustment_mode(&self) -> AdjustmentMode {
        match self.resolved_adjust() {
            AdjustKind::None => AdjustmentMode::None,
            AdjustKind::Lsr => AdjustmentMode::Lsr { epsilon: self.epsilon },
            AdjustKind::Ps => AdjustmentMode::ProbabilityShift,
        }
    }

    pub fn dtd_config(&self) -> DtdConfig {
        DtdConfig {
            scheme: match self.weights {
                WeightKind::Flsw => WeightScheme::Flsw { gamma: self.gamma },
                WeightKind::Cwsm => WeightScheme::Cwsm,
            },
            tau0: self.tau0,
            beta: self.beta,
            tau_min: self.tau_min,
        }
    }

    /// Rejects flag combinations that have no meaning for the chosen spec.
    pub fn check_distill_flags(&self) -> Result<()> {
        let spec = self.spec;
        let reject = |key: &str, why: &str| -> Result<()> {
            if self.is_explicit(key) {
                return Err(KdError::Config(format!("{key} cannot be used with spec '{}': {why}", spec.name())));
            }
            Ok(())
        };
        if !spec.uses_adjustment() && self.resolved_adjust() != AdjustKind::None {
            return Err(KdError::Config(format!(
                "distill.adjust={} cannot be used with spec '{}': only ka and dtd-ka adjust targets",
                self.resolved_adjust().name(),
                spec.name()
            )));
        }
        if self.resolved_adjust() != AdjustKind::Lsr {
            reject("distill.epsilon", "epsilon only applies to LSR adjustment")?;
        }
        if !spec.uses_dynamic_tau() {
            for key in ["dtd.weights", "dtd.gamma", "dtd.tau0", "dtd.beta", "dtd.tau_min"] {
                reject(key, "only dtd and dtd-ka use dynamic temperatures")?;
            }
        } else {
            reject("distill.tau", "dynamic-temperature specs use dtd.tau0")?;
            if self.weights == WeightKind::Cwsm {
                reject("dtd.gamma", "gamma only applies to FLSW weights")?;
            }
        }
        if !spec.uses_alpha() {
            reject("distill.alpha", "only kd and dtd mix in the hard-label term")?;
        }
        if matches!(spec, SpecKind::Ce) {
            reject("distill.tau", "plain cross entropy has no temperature")?;
        }
        Ok(())
    }

    pub fn train_loss(&self) -> TrainLoss {
        let spec = match self.spec {
            SpecKind::Ce => return TrainLoss::CrossEntropy,
            SpecKind::Kd => DistillSpec::Kd { tau: self.tau, alpha: self.alpha },
            SpecKind::Ka => DistillSpec::Ka { tau: self.tau, adjust: self.adjustment_mode() },
            SpecKind::Dtd => DistillSpec::Dtd { cfg: self.dtd_config(), alpha: self.alpha },
            SpecKind::DtdKa => DistillSpec::DtdKa { cfg: self.dtd_config(), adjust: self.adjustment_mode() },
        };
        TrainLoss::Distill(spec)
    }

    pub fn train_config(&self, loss: TrainLoss) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            batch_size: self.train_batch_size,
            lr0: self.train_lr0,
            momentum: self.train_momentum,
            weight_decay: self.train_weight_decay,
            schedule: match self.train_schedule {
                ScheduleKind::Cosine => LrSchedule::Cosine { total_epochs: self.train_epochs.max(1) },
                ScheduleKind::Step => LrSchedule::Step {
                    milestones: self.train_milestones.clone(),
                    factor: self.train_factor,
                },
            },
            seed: self.seed,
            loss,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("dtd.beta", "12.5").unwrap();
        cfg.set("teacher.hidden", "64,64").unwrap();
        cfg.set("paths.out", "runs/a").unwrap();
        let again = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(again.to_text(), cfg.to_text());
        assert_eq!(again.beta, 12.5);
        assert_eq!(again.teacher_hidden, vec![64, 64]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_text("train.lr0 = 0.1\ndtd.betta = 3\n").unwrap_err();
        assert!(err.to_string().contains("dtd.betta"), "{err}");
        assert!(RunConfig::from_text("no equals sign").is_err());
        assert!(RunConfig::from_text("train.epochs = many").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::from_text("# header\n\n  seed = 9  \n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert!(cfg.is_explicit("seed"));
        assert!(!cfg.is_explicit("train.lr0"));
    }

    #[test]
    fn adjustment_resolves_from_spec() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolved_adjust(), AdjustKind::None);
        cfg.set("distill.spec", "dtd-ka").unwrap();
        assert_eq!(cfg.resolved_adjust(), AdjustKind::Ps);
        assert!(cfg.to_text().contains("distill.adjust = ps"));
    }

    #[test]
    fn incompatible_flags() {
        let mut cfg = RunConfig::default();
        cfg.set("distill.spec", "kd").unwrap();
        cfg.set("distill.adjust", "ps").unwrap();
        assert!(cfg.check_distill_flags().is_err());

        let mut cfg = RunConfig::default();
        cfg.set("distill.spec", "ka").unwrap();
        cfg.set("dtd.beta", "3").unwrap();
        assert!(cfg.check_distill_flags().is_err());

        let mut cfg = RunConfig::default();
        cfg.set("distill.spec", "dtd-ka").unwrap();
        cfg.set("distill.adjust", "ps").unwrap();
        cfg.set("dtd.weights", "flsw").unwrap();
        assert!(cfg.check_distill_flags().is_ok());
        cfg.set("distill.epsilon", "0.9").unwrap();
        assert!(cfg.check_distill_flags().is_err());
    }

    #[test]
    fn printed_config_reloads_without_conflicts() {
        let mut cfg = RunConfig::default();
        cfg.set("distill.spec", "kd").unwrap();
        let mut again = RunConfig::from_text(&cfg.to_text()).unwrap();
        again.clear_explicit();
        assert!(again.check_distill_flags().is_ok());
    }

    #[test]
    fn defaults_match_the_algorithm() {
        let mut cfg = RunConfig::default();
        cfg.set("distill.spec", "dtd-ka").unwrap();
        let TrainLoss::Distill(DistillSpec::DtdKa { cfg: dtd, adjust }) = cfg.train_loss() else {
            panic!("expected dtd-ka");
        };
        assert_eq!((dtd.tau0, dtd.beta, dtd.tau_min), (10.0, 40.0, 3.0));
        assert_eq!(dtd.scheme, WeightScheme::Flsw { gamma: 1.0 });
        assert_eq!(adjust, AdjustmentMode::ProbabilityShift);
    }
}
