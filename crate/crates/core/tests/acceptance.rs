//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero on any failure.
//!
//! Run with `cargo test --test acceptance` (add `--release` for the fastest
//! trend run; the test profile is already optimized).

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use kd_toolkit::adjustment::find_misjudged;
use kd_toolkit::analysis::top2_gap_curve;
use kd_toolkit::data::{load_teacher_logits, Dataset, Split};
use kd_toolkit::experiment::{format_table, median, run_trend, SeedResult, TrendSetup};
use kd_toolkit::loss::{evaluate, grad_student_logits, loss_dtd, loss_ka, loss_kd, loss_total, DistillSpec};
use kd_toolkit::temperature::{normalize_l1, tau_per_sample, SampleWeights};
use kd_toolkit::{adjust, AdjustmentMode, DtdConfig, LabelVector, LogitsBatch, SoftTargetBatch, WeightScheme};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize, k: usize, scale: f64) -> LogitsBatch {
    let v: Vec<f64> = (0..n * k).map(|_| rng.random_range(-scale..scale)).collect();
    LogitsBatch::new(Array2::from_shape_vec((n, k), v).unwrap()).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> LabelVector {
    LabelVector::new((0..n).map(|_| rng.random_range(0..k)).collect(), k).unwrap()
}

/// Softmax at temperature `tau`, written out independently of the library.
fn oracle_softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| ((x - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn oracle_kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter().zip(p).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

fn oracle_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best
}

fn correct_supervision() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (n, k) = (10_000, 10);
    let t = random_logits(&mut rng, n, k, 4.0);
    let y = random_labels(&mut rng, n, k);
    let q = kd_toolkit::softmax_tau(&t, 4.0).map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for mode in [AdjustmentMode::lsr(), AdjustmentMode::ProbabilityShift] {
        let (a, report) = adjust(&q, &y, mode).map_err(|e| e.to_string())?;
        let wrong = (0..n).filter(|&i| a.argmax(i) != y.get(i)).count();
        check(wrong == 0, format!("{}: {wrong} rows still wrong", mode.name()))?;
        summary.push(format!("{}: 0/{n} wrong ({} repaired)", mode.name(), report.misjudged_count()));
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(summary.join(", "))
}

fn gradient_specs() -> Vec<DistillSpec> {
    let flsw = DtdConfig { scheme: WeightScheme::Flsw { gamma: 1.0 }, ..DtdConfig::default() };
    let cwsm = DtdConfig { scheme: WeightScheme::Cwsm, ..DtdConfig::default() };
    vec![
        DistillSpec::Kd { tau: 4.0, alpha: 0.7 },
        DistillSpec::Ka { tau: 4.0, adjust: AdjustmentMode::lsr() },
        DistillSpec::Ka { tau: 4.0, adjust: AdjustmentMode::ProbabilityShift },
        DistillSpec::Dtd { cfg: flsw, alpha: 0.7 },
        DistillSpec::Dtd { cfg: cwsm, alpha: 0.7 },
        DistillSpec::DtdKa { cfg: flsw, adjust: AdjustmentMode::lsr() },
        DistillSpec::DtdKa { cfg: flsw, adjust: AdjustmentMode::ProbabilityShift },
        DistillSpec::DtdKa { cfg: cwsm, adjust: AdjustmentMode::lsr() },
        DistillSpec::DtdKa { cfg: cwsm, adjust: AdjustmentMode::ProbabilityShift },
    ]
}

/// Batches where a finite-difference step could cross a kink are not
/// differentiable there and are redrawn: a raw temperature within 1e-2 of the
/// clamp, or a CWSM row whose top two logits are within 1e-3.
fn near_kink(spec: &DistillSpec, v: &LogitsBatch, t: &LogitsBatch) -> bool {
    let cfg = match spec {
        DistillSpec::Dtd { cfg, .. } | DistillSpec::DtdKa { cfg, .. } => *cfg,
        _ => return false,
    };
    let (w, _) = cfg.temperatures(v, t).unwrap();
    let n = w.len() as f64;
    let mean = w.omega().iter().sum::<f64>() / n;
    if w.omega().iter().any(|&wx| (cfg.tau0 + (mean - wx) * cfg.beta - cfg.tau_min).abs() < 1e-2) {
        return true;
    }
    if cfg.scheme == WeightScheme::Cwsm {
        for i in 0..v.n() {
            let mut row = v.row(i).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            if row[0] - row[1] < 1e-3 {
                return true;
            }
        }
    }
    false
}

fn finite_difference(spec: &DistillSpec, v: &LogitsBatch, t: &LogitsBatch, y: &LabelVector, h: f64) -> Array2<f64> {
    let base = v.values().to_owned();
    let mut out = Array2::zeros(base.dim());
    for ((i, j), o) in out.indexed_iter_mut() {
        let mut plus = base.clone();
        plus[[i, j]] += h;
        let mut minus = base.clone();
        minus[[i, j]] -= h;
        let lp = evaluate(spec, &LogitsBatch::new(plus).unwrap(), t, y).unwrap().per_sample;
        let lm = evaluate(spec, &LogitsBatch::new(minus).unwrap(), t, y).unwrap().per_sample;
        // difference per sample before summing, so rows that did not move
        // cancel exactly instead of adding roundoff
        *o = lp.iter().zip(&lm).map(|(a, b)| a - b).sum::<f64>() / (2.0 * h);
    }
    out
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let shapes: Vec<(usize, usize)> = [1, 3, 8].iter().flat_map(|&n| [2, 5, 20].map(|k| (n, k))).collect();
    let (mut worst_rel, mut worst_abs, mut redrawn, mut checked) = (0.0f64, 0.0f64, 0, 0usize);
    for spec in gradient_specs() {
        for b in 0..100 {
            let (n, k) = shapes[b % shapes.len()];
            let (v, t, y) = loop {
                let v = random_logits(&mut rng, n, k, 3.0);
                let t = random_logits(&mut rng, n, k, 3.0);
                let y = random_labels(&mut rng, n, k);
                if near_kink(&spec, &v, &t) {
                    redrawn += 1;
                    continue;
                }
                break (v, t, y);
            };
            let g = grad_student_logits(&spec, &v, &t, &y).map_err(|e| e.to_string())?;
            let fd = finite_difference(&spec, &v, &t, &y, 1e-5);
            for (a, f) in g.iter().zip(fd.iter()) {
                checked += 1;
                // a relative error is meaningless for a gradient that is zero
                // up to roundoff; compare those absolutely
                if a.abs() < 1e-8 {
                    worst_abs = worst_abs.max((a - f).abs());
                    check((a - f).abs() < 1e-8, format!("{}: analytic {a:e} vs fd {f:e}", spec.name()))?;
                } else {
                    let rel = ((a - f) / a).abs();
                    worst_rel = worst_rel.max(rel);
                    check(rel < 1e-4, format!("{} N={n} K={k}: analytic {a} vs fd {f} (rel {rel:e})", spec.name()))?;
                }
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "9 specs x 100 batches, {checked} entries, worst rel {worst_rel:.1e}, worst abs {worst_abs:.1e}, {redrawn} redrawn near kinks, {:.2?}",
        start.elapsed()
    ))
}

fn degeneracies() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = [0.0f64; 3];
    for _ in 0..200 {
        let (n, k) = (rng.random_range(1..10), rng.random_range(2..12));
        let v = random_logits(&mut rng, n, k, 4.0);
        let t = random_logits(&mut rng, n, k, 4.0);
        let y = random_labels(&mut rng, n, k);
        let tau = rng.random_range(3.5..12.0);
        let alpha = rng.random_range(0.0..=1.0);

        // (a) DTD with β = 0 and τ0 = τ against KD, KL term and total
        let cfg = DtdConfig { beta: 0.0, tau0: tau, tau_min: 3.0, ..DtdConfig::default() };
        let dtd = loss_dtd(&v, &t, &y, cfg, alpha).map_err(|e| e.to_string())?;
        let kd = loss_kd(&v, &t, &y, tau, alpha).map_err(|e| e.to_string())?;
        worst[0] = worst[0].max((dtd.kl_part - kd.kl_part).abs()).max((dtd.total - kd.total).abs());

        // (b) KA without adjustment against the α = 1 KD slice
        let ka = loss_ka(&v, &t, &y, tau, AdjustmentMode::None).map_err(|e| e.to_string())?;
        let kd1 = loss_kd(&v, &t, &y, tau, 1.0).map_err(|e| e.to_string())?;
        worst[1] = worst[1].max((ka.total - kd1.total).abs());

        // (c) DTD-KA, β = 0, teacher always right, no adjustment
        let y_right = LabelVector::new((0..n).map(|i| oracle_argmax(t.row(i).as_slice().unwrap())).collect(), k).unwrap();
        let got = loss_total(&v, &t, &y_right, cfg, AdjustmentMode::None).map_err(|e| e.to_string())?;
        let oracle: f64 = (0..n)
            .map(|i| {
                let q = oracle_softmax(t.row(i).as_slice().unwrap(), tau);
                let p = oracle_softmax(v.row(i).as_slice().unwrap(), tau);
                tau * tau * oracle_kl(&q, &p)
            })
            .sum();
        worst[2] = worst[2].max((got.total - oracle).abs());
    }
    for (name, w) in ["a", "b", "c"].iter().zip(worst) {
        check(w < 1e-10, format!("({name}) max difference {w:e}"))?;
    }
    Ok(format!("max differences (a) {:.1e}, (b) {:.1e}, (c) {:.1e}", worst[0], worst[1], worst[2]))
}

fn temperature_fixtures() -> Outcome {
    let w = normalize_l1(&SampleWeights::new(vec![0.75, 0.25]).unwrap());
    let tau = tau_per_sample(&w, 10.0, 40.0, 3.0).map_err(|e| e.to_string())?;
    check(tau.tau() == [3.0, 20.0], format!("expected [3, 20], got {:?}", tau.tau()))?;
    check(tau.clamped() == [true, false], "only the first sample should clamp")?;

    let uniform = normalize_l1(&SampleWeights::new(vec![1.0; 7]).unwrap());
    let tau = tau_per_sample(&uniform, 10.0, 40.0, 3.0).map_err(|e| e.to_string())?;
    check(tau.tau().iter().all(|&x| x == 10.0), format!("uniform weights gave {:?}", tau.tau()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..64);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let w = normalize_l1(&SampleWeights::new(raw).unwrap());
        // tau_min far below any reachable value, so nothing clamps
        let tau = tau_per_sample(&w, 10.0, 5.0, 1e-3).map_err(|e| e.to_string())?;
        check(tau.clamped().iter().all(|c| !c), "unexpected clamp")?;
        let mean = tau.tau().iter().sum::<f64>() / n as f64;
        worst = worst.max((mean - 10.0).abs());
    }
    check(worst < 1e-9, format!("batch mean off by {worst:e}"))?;
    Ok(format!("[0.75, 0.25] -> [3, 20], uniform -> tau0, mean error {worst:.1e}"))
}

fn lsr_fixture() -> Outcome {
    let k = 100;
    let q = SoftTargetBatch::from_rows(&[{
        // teacher confidently wrong: class 0 peaks, truth is class 7
        let mut row = vec![0.5 / 99.0; k];
        row[0] = 0.5;
        row
    }])
    .map_err(|e| e.to_string())?;
    let y = LabelVector::new(vec![7], k).unwrap();
    let (a, _) = adjust(&q, &y, AdjustmentMode::Lsr { epsilon: 0.985 }).map_err(|e| e.to_string())?;
    let row = a.row(0);
    check((row[7] - 0.02485).abs() < 1e-12, format!("true class {}", row[7]))?;
    for j in (0..k).filter(|&j| j != 7) {
        check((row[j] - 0.00985).abs() < 1e-12, format!("class {j}: {}", row[j]))?;
    }
    let sum: f64 = row.sum();
    check((sum - 1.0).abs() < 1e-12, format!("row sums to {sum}"))?;
    Ok(format!("true {:.5}, other {:.5}, sum - 1 = {:.1e}", row[7], row[0], sum - 1.0))
}

fn ps_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let rows = 10_000;
    let mut worst_sum = 0.0f64;
    for _ in 0..rows {
        let k = rng.random_range(2..20);
        let t = random_logits(&mut rng, 1, k, 5.0);
        let top = oracle_argmax(t.row(0).as_slice().unwrap());
        // any label other than the teacher's choice makes the row misjudged
        let label = (top + rng.random_range(1..k)) % k;
        let y = LabelVector::new(vec![label], k).unwrap();
        let q = kd_toolkit::softmax_tau(&t, rng.random_range(1.0..10.0)).map_err(|e| e.to_string())?;
        let (a, report) = adjust(&q, &y, AdjustmentMode::ProbabilityShift).map_err(|e| e.to_string())?;
        check(report.misjudged_count() == 1, "row not flagged as misjudged")?;
        let before = q.row(0).to_vec();
        let after = a.row(0).to_vec();
        let mut sb = before.clone();
        let mut sa = after.clone();
        sb.sort_by(f64::total_cmp);
        sa.sort_by(f64::total_cmp);
        check(sb == sa, "multiset of values changed")?;
        let diff = (before.iter().sum::<f64>() - after.iter().sum::<f64>()).abs();
        worst_sum = worst_sum.max(diff);
        check(diff < 1e-12, format!("row sum changed by {diff:e}"))?;
        let changed = before.iter().zip(&after).filter(|(x, y)| x != y).count();
        check(changed <= 2, format!("{changed} positions changed"))?;
        check(oracle_argmax(&after) == label, "argmax is not the ground truth")?;
    }
    Ok(format!("{rows} rows, multiset exact, sum drift {worst_sum:.1e}, <= 2 changes, argmax = truth"))
}

fn trend(results: &[SeedResult]) -> Vec<(String, Outcome)> {
    let med = |f: &dyn Fn(&SeedResult) -> f64| median(&mut results.iter().map(f).collect::<Vec<_>>());
    let (ce, kd, dtd) = (med(&|r| r.ce.val_acc), med(&|r| r.kd.val_acc), med(&|r| r.dtd_ka.val_acc));
    let (kd_g, dtd_g) = (med(&|r| r.kd.genetic_ratio), med(&|r| r.dtd_ka.genetic_ratio));
    let pt = |x: f64| x * 100.0;
    let verdict = |ok: bool, msg: String| if ok { Ok(msg) } else { Err(msg) };
    vec![
        (
            "trend (a) KD accuracy >= CE - 0.5 pt".into(),
            verdict(kd >= ce - 0.005, format!("kd {:.2}% vs ce {:.2}%", pt(kd), pt(ce))),
        ),
        (
            "trend (b) DTD-KA genetic ratio <= KD".into(),
            verdict(dtd_g <= kd_g, format!("dtd-ka {:.2}% vs kd {:.2}%", pt(dtd_g), pt(kd_g))),
        ),
        (
            "trend (c) DTD-KA accuracy >= KD - 0.5 pt".into(),
            verdict(dtd >= kd - 0.005, format!("dtd-ka {:.2}% vs kd {:.2}%", pt(dtd), pt(kd))),
        ),
    ]
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_kd-toolkit")
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        return Err(format!(
            "{} exited with {:?}: {}",
            args[0],
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(stdout)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small data set and an under-fit teacher that gets some training samples wrong.
fn cli_fixture(root: &Path) -> Result<(), String> {
    let data = root.join("data");
    let teacher = root.join("teacher");
    run_cli(&["gen-data", "--out", p(&data), "--seed", "7", "--k", "5", "--n-per-class", "60", "--d", "8", "--spread", "1.2"])?;
    run_cli(&[
        "train-teacher", "--data", p(&data), "--out", p(&teacher), "--seed", "7", "--hidden", "16",
        "--epochs", "3", "--batch-size", "32", "--lr0", "0.01",
    ])?;
    Ok(())
}

fn baseline2(root: &Path) -> Outcome {
    let data = root.join("data");
    let logits_path = root.join("teacher/teacher_train.tlgt");
    let out = root.join("b2");
    let stdout = run_cli(&[
        "distill", "--data", p(&data), "--teacher-logits", p(&logits_path), "--out", p(&out), "--spec", "ce",
        "--baseline2", "--seed", "3", "--hidden", "8", "--epochs", "2", "--batch-size", "32",
    ])?;
    let train = Dataset::load(&data, Split::Train).map_err(|e| e.to_string())?;
    let logits = load_teacher_logits(&logits_path).map_err(|e| e.to_string())?;
    let (mask, _) = find_misjudged(&logits, &train.labels).map_err(|e| e.to_string())?;
    let expected = mask.iter().filter(|&&m| m).count();
    check(expected > 0, "fixture teacher misjudges nothing; the check would be vacuous")?;
    check(
        stdout.contains(&format!("removed {expected} misjudged")),
        format!("expected {expected} removed, output was:\n{stdout}"),
    )?;
    check(
        stdout.contains(&format!("trained on {} samples", train.len() - expected)),
        format!("wrong training size in:\n{stdout}"),
    )?;
    let csv = std::fs::read_to_string(out.join("baseline2_removed.csv")).map_err(|e| e.to_string())?;
    let listed: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    let want: Vec<usize> = (0..train.len()).filter(|&i| mask[i]).map(|i| train.ids[i]).collect();
    check(listed == want, "removed sample ids differ from the misjudged set")?;
    check(out.join("student.kdck").exists(), "no checkpoint written")?;
    Ok(format!("removed {expected} of {} samples, training completed", train.len()))
}

fn top2_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let v = random_logits(&mut rng, 1000, 10, 3.0);
    let thresholds: Vec<f64> = (1..=50).map(|i| i as f64 / 50.0).collect();
    let curve = top2_gap_curve(&v, &thresholds).map_err(|e| e.to_string())?;
    let gaps: Vec<f64> = (0..v.n())
        .map(|i| {
            let mut p = oracle_softmax(v.row(i).as_slice().unwrap(), 1.0);
            p.sort_by(|a, b| b.total_cmp(a));
            p[0] - p[1]
        })
        .collect();
    let mut mismatches = 0;
    for &(t, count) in &curve {
        let brute = gaps.iter().filter(|&&g| g < t).count();
        if brute != count {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches} thresholds disagree with brute force"))?;
    check(curve.windows(2).all(|w| w[0].1 <= w[1].1), "curve is not monotone")?;
    Ok(format!("1000 rows, 50 thresholds match, last count {}", curve.last().unwrap().1))
}

fn determinism(root: &Path) -> Outcome {
    let data = root.join("data");
    let teacher = root.join("teacher/teacher.kdck");
    let run = |name: &str| {
        let out = root.join(name);
        run_cli(&[
            "distill", "--data", p(&data), "--teacher", p(&teacher), "--out", p(&out), "--spec", "dtd-ka",
            "--weights", "cwsm", "--seed", "11", "--hidden", "8", "--epochs", "3", "--batch-size", "32",
        ])
        .map(|_| out)
    };
    let a = run("det_a")?;
    let b = run("det_b")?;
    for file in ["student.kdck", "metrics.csv", "steps.csv"] {
        let x = std::fs::read(a.join(file)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(file)).map_err(|e| e.to_string())?;
        check(x == y, format!("{file} differs between runs"))?;
    }
    Ok("student.kdck, metrics.csv, steps.csv bit-identical".into())
}

fn main() {
    let mut results: Vec<(String, Outcome)> = vec![
        ("correct supervision after adjustment".into(), correct_supervision()),
        ("gradient suite vs finite differences".into(), gradient_suite()),
        ("degeneracy equalities".into(), degeneracies()),
        ("temperature fixtures".into(), temperature_fixtures()),
        ("LSR fixture".into(), lsr_fixture()),
        ("probability shift properties".into(), ps_properties()),
    ];

    let start = Instant::now();
    let trend_rows = match run_trend(&TrendSetup::default(), &[1, 2, 3, 4, 5], 1) {
        Ok(r) => {
            let elapsed = start.elapsed();
            let mut rows = trend(&r);
            let failed = rows.iter().any(|(_, o)| o.is_err());
            if failed || std::env::var_os("KD_ACCEPTANCE_VERBOSE").is_some() {
                println!("{}", format_table(&r));
            }
            rows.push((
                "trend runtime under 10 min".into(),
                within(elapsed, Duration::from_secs(600)).map(|_| format!("{elapsed:.1?}")),
            ));
            rows
        }
        Err(e) => vec![("trend".into(), Err(e.to_string()))],
    };
    results.extend(trend_rows);

    let dir = tempfile::tempdir().expect("temp dir");
    match cli_fixture(dir.path()) {
        Ok(()) => {
            results.push(("baseline-2 wiring".into(), baseline2(dir.path())));
            results.push(("top-2 curve oracle".into(), top2_oracle()));
            results.push(("distill determinism".into(), determinism(dir.path())));
        }
        Err(e) => {
            results.push(("baseline-2 wiring".into(), Err(format!("fixture: {e}"))));
            results.push(("top-2 curve oracle".into(), top2_oracle()));
            results.push(("distill determinism".into(), Err(format!("fixture: {e}"))));
        }
    }

    let mut failures = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(msg) => println!("PASS {name}: {msg}"),
            Err(msg) => {
                failures += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    println!("{} passed, {failures} failed", results.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
