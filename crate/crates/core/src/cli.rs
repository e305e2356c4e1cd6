//! Subcommands of the `kd-toolkit` binary.
//!
//! Each command resolves a [`RunConfig`] (defaults, then `--config FILE`,
//! then `--set key=value`, then dedicated flags), optionally echoes it with
//! `--print-config`, and runs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::adjustment::find_misjudged;
use crate::analysis::{accuracy, default_thresholds, EvalReport};
use crate::config::RunConfig;
use crate::data::{self, export_teacher_logits, filter_misjudged, gen_synthetic, predict_logits, Dataset, Split, Splits};
use crate::error::{KdError, Result};
use crate::experiment::{format_table, median, run_trend, TrendSetup};
use crate::nn::{checkpoint, init_params, train, Architecture, TeacherSource, TrainLoss};
use crate::soft_targets::LogitsBatch;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(err: &KdError) -> i32 {
    match err {
        KdError::InvalidArgument(_) | KdError::ShapeMismatch(_) | KdError::Config(_) => EXIT_USAGE,
        KdError::Corrupt { .. } | KdError::Io(_) => EXIT_IO,
        KdError::Numerical { .. } => EXIT_NUMERICAL,
    }
}

#[derive(Debug, Parser)]
#[command(name = "kd-toolkit", version, about = "Knowledge distillation experiments on small MLPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic Gaussian-blob train/val/test splits.
    GenData(GenDataArgs),
    /// Train a teacher with cross entropy and export its logits.
    TrainTeacher(TrainTeacherArgs),
    /// Train a student with cross entropy or a distillation loss.
    Distill(DistillArgs),
    /// Accuracy, genetic errors and the top-2 gap curve for one split.
    Eval(EvalArgs),
    /// Multi-seed CE / KD / DTD-KA comparison on synthetic blobs.
    Trend(TrendArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// key = value configuration file.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// cosine or step
    #[arg(long)]
    pub schedule: Option<String>,
    /// Comma-separated epochs for the step schedule.
    #[arg(long)]
    pub milestones: Option<String>,
    #[arg(long)]
    pub factor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub spread: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainTeacherArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated hidden widths.
    #[arg(long)]
    pub hidden: Option<String>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Teacher checkpoint.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Teacher logits for the training split.
    #[arg(long)]
    pub teacher_logits: Option<PathBuf>,
    /// Comma-separated hidden widths of the student.
    #[arg(long)]
    pub hidden: Option<String>,
    /// ce, kd, ka, dtd or dtd-ka
    #[arg(long)]
    pub spec: Option<String>,
    /// none, lsr or ps
    #[arg(long)]
    pub adjust: Option<String>,
    /// flsw or cwsm
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub tau0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tau_min: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Drop training samples the teacher misclassifies before training.
    #[arg(long)]
    pub baseline2: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// train, val or test
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub student: Option<PathBuf>,
    #[arg(long)]
    pub student_logits: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub teacher_logits: Option<PathBuf>,
    /// Number of evenly spaced gap thresholds in (0, 1].
    #[arg(long)]
    pub thresholds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrendArgs {
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3,4,5")]
    pub seeds: String,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
}

type Overrides = Vec<(&'static str, String)>;

fn push<T: ToString>(o: &mut Overrides, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        o.push((key, v.to_string()));
    }
}

fn push_path(o: &mut Overrides, key: &'static str, v: &Option<PathBuf>) {
    if let Some(v) = v {
        o.push((key, v.display().to_string()));
    }
}

impl TrainArgs {
    fn overrides(&self, o: &mut Overrides) {
        push(o, "train.epochs", &self.epochs);
        push(o, "train.batch_size", &self.batch_size);
        push(o, "train.lr0", &self.lr0);
        push(o, "train.momentum", &self.momentum);
        push(o, "train.weight_decay", &self.weight_decay);
        push(o, "train.schedule", &self.schedule);
        push(o, "train.milestones", &self.milestones);
        push(o, "train.factor", &self.factor);
    }
}

fn resolve(common: &CommonArgs, flags: Overrides) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.clear_explicit();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| KdError::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| KdError::Config(format!("missing {key} (set the flag or the config key)")))
}

fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(crate::error::io_at(path))?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Parses arguments, runs the command, and maps failures to exit codes.
pub fn run_from_args<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a, out),
        Command::TrainTeacher(a) => cmd_train_teacher(&a, out),
        Command::Distill(a) => cmd_distill(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Trend(a) => cmd_trend(&a, out),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let mut o = Overrides::new();
    push_path(&mut o, "paths.out", &a.out);
    push(&mut o, "data.k", &a.k);
    push(&mut o, "data.n_per_class", &a.n_per_class);
    push(&mut o, "data.d", &a.d);
    push(&mut o, "data.spread", &a.spread);
    let cfg = resolve(&a.common, o)?;
    if a.common.print_config {
        write!(out, "{}", cfg.to_text())?;
        return Ok(());
    }
    let dir = require(&cfg.paths_out, "paths.out (--out)")?;
    fs::create_dir_all(dir)?;
    let splits = gen_synthetic(&cfg.synthetic_params())?;
    splits.save(dir)?;
    for split in Split::ALL {
        writeln!(out, "{split}: {} samples", splits.get(split).len())?;
    }
    Ok(())
}

fn architecture(ds: &Dataset, hidden: &[usize]) -> Architecture {
    Architecture::new(ds.dim(), hidden.to_vec(), ds.k())
}

pub fn cmd_train_teacher(a: &TrainTeacherArgs, out: &mut dyn Write) -> Result<()> {
    let mut o = Overrides::new();
    a.train.overrides(&mut o);
    push_path(&mut o, "paths.data", &a.data);
    push_path(&mut o, "paths.out", &a.out);
    push(&mut o, "teacher.hidden", &a.hidden);
    let cfg = resolve(&a.common, o)?;
    if a.common.print_config {
        write!(out, "{}", cfg.to_text())?;
        return Ok(());
    }
    let data_dir = require(&cfg.paths_data, "paths.data (--data)")?;
    let out_dir = require(&cfg.paths_out, "paths.out (--out)")?;
    let splits = Splits::load(data_dir)?;
    fs::create_dir_all(out_dir)?;

    let init = init_params(&architecture(&splits.train, &cfg.teacher_hidden), cfg.seed)?;
    let tc = cfg.train_config(TrainLoss::CrossEntropy);
    let (teacher, log) = train(TeacherSource::None, &init, &splits.train, Some(&splits.val), &tc)?;
    checkpoint::save(&teacher, &out_dir.join("teacher.kdck"))?;
    write_file(&out_dir.join("teacher_metrics.csv"), |w| log.write_epochs_csv(w))?;
    for split in Split::ALL {
        let ds = splits.get(split);
        let logits = export_teacher_logits(&teacher, ds, &out_dir.join(format!("teacher_{split}.tlgt")))?;
        writeln!(out, "{split} accuracy: {:.4}", accuracy(&logits, &ds.labels)?)?;
    }
    Ok(())
}

pub fn cmd_distill(a: &DistillArgs, out: &mut dyn Write) -> Result<()> {
    let mut o = Overrides::new();
    a.train.overrides(&mut o);
    push_path(&mut o, "paths.data", &a.data);
    push_path(&mut o, "paths.out", &a.out);
    push_path(&mut o, "paths.teacher", &a.teacher);
    push_path(&mut o, "paths.teacher_logits", &a.teacher_logits);
    push(&mut o, "student.hidden", &a.hidden);
    push(&mut o, "distill.spec", &a.spec);
    push(&mut o, "distill.adjust", &a.adjust);
    push(&mut o, "dtd.weights", &a.weights);
    push(&mut o, "dtd.gamma", &a.gamma);
    push(&mut o, "dtd.tau0", &a.tau0);
    push(&mut o, "dtd.beta", &a.beta);
    push(&mut o, "dtd.tau_min", &a.tau_min);
    push(&mut o, "distill.alpha", &a.alpha);
    push(&mut o, "distill.tau", &a.tau);
    push(&mut o, "distill.epsilon", &a.epsilon);
    if a.baseline2 {
        o.push(("distill.baseline2", "true".into()));
    }
    let cfg = resolve(&a.common, o)?;
    cfg.check_distill_flags()?;
    let loss = cfg.train_loss();
    let tc = cfg.train_config(loss);
    tc.validate()?;
    if a.common.print_config {
        write!(out, "{}", cfg.to_text())?;
        return Ok(());
    }
    let data_dir = require(&cfg.paths_data, "paths.data (--data)")?;
    let out_dir = require(&cfg.paths_out, "paths.out (--out)")?;
    let train_full = Dataset::load(data_dir, Split::Train)?;
    let val = Dataset::load(data_dir, Split::Val)?;
    fs::create_dir_all(out_dir)?;

    let needs_teacher = matches!(loss, TrainLoss::Distill(_)) || cfg.baseline2;
    let teacher_logits = if needs_teacher {
        Some(load_teacher_for(&cfg, &train_full)?)
    } else {
        if cfg.paths_teacher.is_some() || cfg.paths_teacher_logits.is_some() {
            info!("spec ce: teacher inputs are ignored");
        }
        None
    };

    let (train_ds, teacher_logits) = match (&teacher_logits, cfg.baseline2) {
        (Some(t), true) => {
            let (_, report) = find_misjudged(t, &train_full.labels)?;
            let filtered = filter_misjudged(&train_full, t)?;
            write_file(&out_dir.join("baseline2_removed.csv"), |w| {
                writeln!(w, "sample_id,teacher_argmax,ground_truth")?;
                for ((&i, &p), &y) in report.misjudged_ids.iter().zip(&report.teacher_argmax).zip(&report.ground_truth) {
                    writeln!(w, "{},{p},{y}", train_full.ids[i])?;
                }
                Ok(())
            })?;
            writeln!(out, "baseline2: removed {} misjudged training samples", filtered.removed)?;
            if filtered.dataset.is_empty() {
                return Err(KdError::Config("baseline2 removed every training sample".into()));
            }
            let kept_logits = t.select(&filtered.kept)?;
            (filtered.dataset, Some(kept_logits))
        }
        (t, _) => (train_full, t.clone()),
    };

    let init = init_params(&architecture(&train_ds, &cfg.student_hidden), cfg.seed)?;
    let source = match &teacher_logits {
        Some(t) => TeacherSource::Logits(t),
        None => TeacherSource::None,
    };
    let (student, log) = train(source, &init, &train_ds, Some(&val), &tc)?;
    checkpoint::save(&student, &out_dir.join("student.kdck"))?;
    write_file(&out_dir.join("metrics.csv"), |w| log.write_epochs_csv(w))?;
    write_file(&out_dir.join("steps.csv"), |w| log.write_steps_csv(w))?;
    fs::write(out_dir.join("config.txt"), cfg.to_text())?;
    writeln!(out, "spec: {}", loss.name())?;
    writeln!(out, "trained on {} samples", train_ds.len())?;
    if let Some(acc) = log.final_val_acc() {
        writeln!(out, "val accuracy: {acc:.4}")?;
    }
    Ok(())
}

/// Teacher logits for the training split, from a logits file or a checkpoint.
fn load_teacher_for(cfg: &RunConfig, train_ds: &Dataset) -> Result<LogitsBatch> {
    if let Some(path) = &cfg.paths_teacher_logits {
        if cfg.paths_teacher.is_some() {
            warn!("both teacher logits and checkpoint given; using the logits file");
        }
        return data::load_teacher_logits(path);
    }
    if let Some(path) = &cfg.paths_teacher {
        let teacher = checkpoint::load(path)?;
        return predict_logits(&teacher, train_ds.features.view());
    }
    Err(KdError::Config(format!(
        "spec '{}' needs --teacher or --teacher-logits",
        cfg.spec.name()
    )))
}

fn logits_from(ckpt: &Option<PathBuf>, logits: &Option<PathBuf>, ds: &Dataset, what: &str) -> Result<LogitsBatch> {
    match (logits, ckpt) {
        (Some(path), _) => data::load_teacher_logits(path),
        (None, Some(path)) => predict_logits(&checkpoint::load(path)?, ds.features.view()),
        (None, None) => Err(KdError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no {what} checkpoint or logits given"),
        ))),
    }
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut o = Overrides::new();
    push_path(&mut o, "paths.data", &a.data);
    push_path(&mut o, "paths.out", &a.out);
    push(&mut o, "eval.split", &a.split);
    push_path(&mut o, "paths.student", &a.student);
    push_path(&mut o, "paths.student_logits", &a.student_logits);
    push_path(&mut o, "paths.teacher", &a.teacher);
    push_path(&mut o, "paths.teacher_logits", &a.teacher_logits);
    push(&mut o, "eval.thresholds", &a.thresholds);
    let cfg = resolve(&a.common, o)?;
    if a.common.print_config {
        write!(out, "{}", cfg.to_text())?;
        return Ok(());
    }
    let data_dir = require(&cfg.paths_data, "paths.data (--data)")?;
    let split = cfg.eval_split;
    let ds = Dataset::load(data_dir, split)?;
    let student = logits_from(&cfg.paths_student, &cfg.paths_student_logits, &ds, "student")?;
    let teacher = logits_from(&cfg.paths_teacher, &cfg.paths_teacher_logits, &ds, "teacher")?;
    if cfg.eval_thresholds == 0 {
        return Err(KdError::Config("eval.thresholds must be at least 1".into()));
    }
    let report = EvalReport::compute(&student, &teacher, &ds.labels, &default_thresholds(cfg.eval_thresholds))?;
    if let Some(dir) = &cfg.paths_out {
        fs::create_dir_all(dir)?;
        write_file(&dir.join(format!("eval_{split}.csv")), |w| report.write_csv(w))?;
        write_file(&dir.join(format!("top2_{split}.csv")), |w| report.write_curve_csv(w))?;
    }
    writeln!(out, "split: {split}")?;
    write!(out, "{}", report.summary())?;
    Ok(())
}

pub fn cmd_trend(a: &TrendArgs, out: &mut dyn Write) -> Result<()> {
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| KdError::Config(format!("bad seed '{s}'"))))
        .collect::<Result<_>>()?;
    let mut setup = TrendSetup::default();
    if let Some(e) = a.epochs {
        setup.epochs = e;
    }
    let results = run_trend(&setup, &seeds, a.jobs)?;
    write!(out, "{}", format_table(&results))?;
    let med = |f: &dyn Fn(&crate::experiment::SeedResult) -> f64| median(&mut results.iter().map(f).collect::<Vec<_>>());
    writeln!(
        out,
        "kd - ce: {:+.2} pt, dtd-ka - kd: {:+.2} pt",
        100.0 * (med(&|r| r.kd.val_acc) - med(&|r| r.ce.val_acc)),
        100.0 * (med(&|r| r.dtd_ka.val_acc) - med(&|r| r.kd.val_acc))
    )?;
    Ok(())
}
