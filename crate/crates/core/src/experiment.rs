//! Multi-seed comparison of CE, KD and DTD-KA students against one teacher.
//!
//! For each seed: generate blobs, train the teacher with CE, export its
//! logits, then train three students from the same initialization and
//! evaluate them on the validation split.

use log::info;

use crate::adjustment::AdjustmentMode;
use crate::analysis::{accuracy, genetic_errors};
use crate::data::{gen_synthetic, predict_logits, SyntheticParams};
use crate::error::Result;
use crate::loss::DistillSpec;
use crate::nn::{init_params, train, Architecture, LrSchedule, TeacherSource, TrainConfig, TrainLoss};
use crate::temperature::{DtdConfig, WeightScheme};

#[derive(Debug, Clone, PartialEq)]
pub struct TrendSetup {
    pub data: SyntheticParams,
    pub teacher_hidden: Vec<usize>,
    pub student_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub teacher_lr: f64,
    pub student_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub teacher_weight_decay: f64,
    pub kd_tau: f64,
    pub kd_alpha: f64,
    pub dtd: DtdConfig,
    pub adjust: AdjustmentMode,
}

impl Default for TrendSetup {
    fn default() -> Self {
        Self {
            data: SyntheticParams::default(),
            teacher_hidden: vec![256, 256],
            student_hidden: vec![32],
            epochs: 60,
            batch_size: 128,
            teacher_lr: 0.001,
            student_lr: 0.003,
            momentum: 0.9,
            weight_decay: 5e-4,
            teacher_weight_decay: 1.0,
            kd_tau: 4.0,
            kd_alpha: 0.7,
            dtd: DtdConfig { scheme: WeightScheme::Flsw { gamma: 1.0 }, ..DtdConfig::default() },
            adjust: AdjustmentMode::ProbabilityShift,
        }
    }
}

/// Validation accuracy and genetic-error ratio of one student.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentScore {
    pub val_acc: f64,
    pub genetic: usize,
    pub total_errors: usize,
    pub genetic_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub teacher_val_acc: f64,
    pub teacher_train_misjudged: usize,
    pub ce: StudentScore,
    pub kd: StudentScore,
    pub dtd_ka: StudentScore,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn run_seed(setup: &TrendSetup, seed: u64) -> Result<SeedResult> {
    let splits = gen_synthetic(&SyntheticParams { seed, ..setup.data })?;
    let (train_ds, val) = (&splits.train, &splits.val);
    let k = train_ds.k();
    let d = train_ds.dim();
    let base = |lr0: f64, weight_decay: f64, loss: TrainLoss| TrainConfig {
        epochs: setup.epochs,
        batch_size: setup.batch_size,
        lr0,
        momentum: setup.momentum,
        weight_decay,
        schedule: LrSchedule::Cosine { total_epochs: setup.epochs },
        seed,
        loss,
    };

    let teacher0 = init_params(&Architecture::new(d, setup.teacher_hidden.clone(), k), seed.wrapping_add(1000))?;
    let (teacher, _) = train(
        TeacherSource::None,
        &teacher0,
        train_ds,
        None,
        &base(setup.teacher_lr, setup.teacher_weight_decay, TrainLoss::CrossEntropy),
    )?;
    let teacher_train = predict_logits(&teacher, train_ds.features.view())?;
    let teacher_val = predict_logits(&teacher, val.features.view())?;
    let teacher_val_acc = accuracy(&teacher_val, &val.labels)?;
    let teacher_train_misjudged = (0..train_ds.len())
        .filter(|&i| teacher_train.argmax(i) != train_ds.labels.get(i))
        .count();

    let student0 = init_params(&Architecture::new(d, setup.student_hidden.clone(), k), seed.wrapping_add(2000))?;
    let score = |loss: TrainLoss| -> Result<StudentScore> {
        let (student, _) = train(
            TeacherSource::Logits(&teacher_train),
            &student0,
            train_ds,
            None,
            &base(setup.student_lr, setup.weight_decay, loss),
        )?;
        let logits = predict_logits(&student, val.features.view())?;
        let ge = genetic_errors(&logits, &teacher_val, &val.labels)?;
        Ok(StudentScore {
            val_acc: accuracy(&logits, &val.labels)?,
            genetic: ge.genetic,
            total_errors: ge.total,
            genetic_ratio: ge.ratio,
        })
    };
    let ce = score(TrainLoss::CrossEntropy)?;
    let kd = score(TrainLoss::Distill(DistillSpec::Kd { tau: setup.kd_tau, alpha: setup.kd_alpha }))?;
    let dtd_ka = score(TrainLoss::Distill(DistillSpec::DtdKa { cfg: setup.dtd, adjust: setup.adjust }))?;
    info!(
        "seed {seed}: teacher {:.4}, ce {:.4}, kd {:.4}, dtd-ka {:.4}",
        teacher_val_acc, ce.val_acc, kd.val_acc, dtd_ka.val_acc
    );
    Ok(SeedResult { seed, teacher_val_acc, teacher_train_misjudged, ce, kd, dtd_ka })
}

/// Runs every seed, optionally on `jobs` worker threads. Results come back in
/// seed order and do not depend on `jobs`.
pub fn run_trend(setup: &TrendSetup, seeds: &[u64], jobs: usize) -> Result<Vec<SeedResult>> {
    let jobs = jobs.clamp(1, seeds.len().max(1));
    if jobs == 1 {
        return seeds.iter().map(|&s| run_seed(setup, s)).collect();
    }
    let mut out: Vec<Option<Result<SeedResult>>> = (0..seeds.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (chunk_seeds, chunk_out) in seeds.chunks(seeds.len().div_ceil(jobs)).zip(out.chunks_mut(seeds.len().div_ceil(jobs))) {
            scope.spawn(move || {
                for (s, slot) in chunk_seeds.iter().zip(chunk_out.iter_mut()) {
                    *slot = Some(run_seed(setup, *s));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("every seed ran")).collect()
}

/// Per-seed table followed by medians.
pub fn format_table(results: &[SeedResult]) -> String {
    let mut s = String::from("seed  teacher  misjudged  ce_acc  kd_acc  dtdka_acc  kd_genetic         dtdka_genetic\n");
    for r in results {
        s += &format!(
            "{:<5} {:>7.4}  {:>9}  {:>6.4}  {:>6.4}  {:>9.4}  {:>4}/{:<4} {:>6.2}%  {:>4}/{:<4} {:>6.2}%\n",
            r.seed,
            r.teacher_val_acc,
            r.teacher_train_misjudged,
            r.ce.val_acc,
            r.kd.val_acc,
            r.dtd_ka.val_acc,
            r.kd.genetic,
            r.kd.total_errors,
            r.kd.genetic_ratio * 100.0,
            r.dtd_ka.genetic,
            r.dtd_ka.total_errors,
            r.dtd_ka.genetic_ratio * 100.0
        );
    }
    let med = |f: &dyn Fn(&SeedResult) -> f64| median(&mut results.iter().map(f).collect::<Vec<_>>());
    s += &format!(
        "median teacher {:.4} | ce {:.4} | kd {:.4} | dtd-ka {:.4} | kd genetic {:.2}% | dtd-ka genetic {:.2}%\n",
        med(&|r| r.teacher_val_acc),
        med(&|r| r.ce.val_acc),
        med(&|r| r.kd.val_acc),
        med(&|r| r.dtd_ka.val_acc),
        med(&|r| r.kd.genetic_ratio) * 100.0,
        med(&|r| r.dtd_ka.genetic_ratio) * 100.0
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn tiny_trend_is_deterministic_across_job_counts() {
        let setup = TrendSetup {
            data: SyntheticParams { n_per_class: 20, k: 3, d: 4, spread: 0.5, seed: 0 },
            teacher_hidden: vec![8],
            student_hidden: vec![4],
            epochs: 2,
            batch_size: 16,
            ..TrendSetup::default()
        };
        let a = run_trend(&setup, &[1, 2, 3], 1).unwrap();
        let b = run_trend(&setup, &[1, 2, 3], 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(format_table(&a).lines().count() == 5);
    }
}
