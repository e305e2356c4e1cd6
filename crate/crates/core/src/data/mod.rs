//! Datasets: synthetic generation, on-disk formats, batching, and removal of
//! samples the teacher misclassifies.

pub mod format;

use std::fmt;
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape, KdError, Result};
use crate::nn::{forward, NetworkParams};
use crate::soft_targets::{LabelVector, LogitsBatch};
use format::Magic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split {other:?} (train|val|test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: LabelVector,
    pub split: Split,
    /// Stable sample identifiers, preserved through filtering.
    pub ids: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: LabelVector, split: Split) -> Result<Self> {
        let ids = (0..features.nrows()).collect();
        Self::with_ids(features, labels, split, ids)
    }

    pub fn with_ids(features: Array2<f64>, labels: LabelVector, split: Split, ids: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() || ids.len() != labels.len() {
            return Err(shape(format!(
                "{} feature rows, {} labels, {} ids",
                features.nrows(),
                labels.len(),
                ids.len()
            )));
        }
        if labels.k() < 2 {
            return Err(invalid("a dataset needs at least two classes"));
        }
        Ok(Self { features, labels, split, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k(&self) -> usize {
        self.labels.k()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at the given positions, in that order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            labels: self.labels.select(rows),
            split: self.split,
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
        }
    }

    fn paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
        (
            dir.join(format!("{}.dset", split.name())),
            dir.join(format!("{}.lbls", split.name())),
        )
    }

    /// Writes `<split>.dset` and `<split>.lbls` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let (f, l) = Self::paths(dir, self.split);
        format::write_matrix(&f, Magic::Features, &self.features)?;
        format::write_labels(&l, self.labels.as_slice(), self.k())
    }

    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let (f, l) = Self::paths(dir, split);
        let features = format::read_matrix(&f, Magic::Features)?;
        let (labels, k) = format::read_labels(&l)?;
        Self::new(features, LabelVector::new(labels, k)?, split)
    }

    /// Imports a CSV with a header of feature columns followed by `label`.
    pub fn from_csv(path: &Path, split: Split, k: Option<usize>) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
        let headers = reader.headers().map_err(csv_error)?.clone();
        let label_col = headers
            .iter()
            .position(|h| h.trim() == "label")
            .ok_or_else(|| invalid(format!("{} has no `label` column", path.display())))?;
        let d = headers.len() - 1;
        if d < 1 {
            return Err(invalid("CSV needs at least one feature column"));
        }
        let mut flat = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(csv_error)?;
            for (c, field) in record.iter().enumerate() {
                let field = field.trim();
                if c == label_col {
                    labels.push(field.parse::<usize>().map_err(|e| {
                        invalid(format!("row {}: bad label {field:?}: {e}", line + 1))
                    })?);
                } else {
                    flat.push(field.parse::<f64>().map_err(|e| {
                        invalid(format!("row {}: bad feature {field:?}: {e}", line + 1))
                    })?);
                }
            }
        }
        let k = k.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
        let features = Array2::from_shape_vec((labels.len(), d), flat).map_err(|e| shape(e.to_string()))?;
        Self::new(features, LabelVector::new(labels, k)?, split)
    }
}

fn csv_error(e: csv::Error) -> KdError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => KdError::Io(io),
        other => invalid(format!("CSV: {other:?}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    pub n_per_class: usize,
    pub k: usize,
    pub d: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self { n_per_class: 500, k: 10, d: 32, spread: 0.9, seed: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for split in Split::ALL {
            self.get(split).save(dir)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: Dataset::load(dir, Split::Train)?,
            val: Dataset::load(dir, Split::Val)?,
            test: Dataset::load(dir, Split::Test)?,
        })
    }
}

/// Per-class noise multipliers lie in `[1 − CLASS_SCALE_JITTER, 1 + CLASS_SCALE_JITTER]`.
const CLASS_SCALE_JITTER: f64 = 0.5;

/// `k` Gaussian clusters around random unit-norm centers.
///
/// Class `c` has isotropic noise of scale `spread · s_c`, where the per-class
/// multiplier `s_c` is drawn once from the seed. Samples are split 70/15/15 by
/// a seeded permutation; ids are generation order.
pub fn gen_synthetic(p: &SyntheticParams) -> Result<Splits> {
    if p.k < 2 || p.d < 2 || p.n_per_class < 1 {
        return Err(invalid(format!(
            "need k >= 2, d >= 2, n_per_class >= 1; got k={}, d={}, n_per_class={}",
            p.k, p.d, p.n_per_class
        )));
    }
    if !(p.spread >= 0.0) || !p.spread.is_finite() {
        return Err(invalid(format!("spread must be finite and nonnegative, got {}", p.spread)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut centers = Array2::<f64>::zeros((p.k, p.d));
    for mut c in centers.rows_mut() {
        loop {
            c.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
            let norm = c.dot(&c).sqrt();
            if norm > 1e-8 {
                c /= norm;
                break;
            }
        }
    }
    let scales: Vec<f64> = (0..p.k)
        .map(|_| p.spread * rng.random_range(1.0 - CLASS_SCALE_JITTER..=1.0 + CLASS_SCALE_JITTER))
        .collect();

    let n = p.k * p.n_per_class;
    let mut features = Array2::<f64>::zeros((n, p.d));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        let c = i / p.n_per_class;
        let center = centers.row(c);
        for (x, &m) in row.iter_mut().zip(center.iter()) {
            let z: f64 = rng.sample(StandardNormal);
            *x = m + scales[c] * z;
        }
        labels.push(c);
    }
    let all = Dataset::new(features, LabelVector::new(labels, p.k)?, Split::Train)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = n * 70 / 100;
    let n_val = n * 15 / 100;
    let take = |rows: &[usize], split: Split| {
        let mut sorted = rows.to_vec();
        sorted.sort_unstable();
        Dataset { split, ..all.select(&sorted) }
    };
    Ok(Splits {
        train: take(&order[..n_train], Split::Train),
        val: take(&order[n_train..n_train + n_val], Split::Val),
        test: take(&order[n_train + n_val..], Split::Test),
    })
}

/// One mini-batch; `rows` are positions in the source dataset.
#[derive(Debug, Clone)]
pub struct Batch {
    pub rows: Vec<usize>,
    pub ids: Vec<usize>,
    pub features: Array2<f64>,
    pub labels: LabelVector,
}

/// Permutation for `(seed, epoch)`: one ChaCha stream per epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Shuffled mini-batches for one epoch. The final short batch is kept.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(invalid("batch size must be at least 1"));
    }
    let order = epoch_permutation(dataset.len(), seed, epoch);
    Ok(order
        .chunks(batch_size)
        .map(|rows| Batch {
            rows: rows.to_vec(),
            ids: rows.iter().map(|&r| dataset.ids[r]).collect(),
            features: dataset.features.select(Axis(0), rows),
            labels: dataset.labels.select(rows),
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct Filtered {
    pub dataset: Dataset,
    /// Row positions in the source dataset that survived.
    pub kept: Vec<usize>,
    pub removed: usize,
}

/// Keeps only the samples whose teacher argmax equals the label, in order.
pub fn filter_misjudged(dataset: &Dataset, teacher_logits: &LogitsBatch) -> Result<Filtered> {
    if teacher_logits.n() != dataset.len() {
        return Err(shape(format!(
            "{} teacher rows for {} samples",
            teacher_logits.n(),
            dataset.len()
        )));
    }
    let keep: Vec<usize> = (0..dataset.len())
        .filter(|&i| teacher_logits.argmax(i) == dataset.labels.get(i))
        .collect();
    let removed = dataset.len() - keep.len();
    if keep.is_empty() {
        warn!("teacher misjudges every {} sample; filtered dataset is empty", dataset.split);
    }
    Ok(Filtered { dataset: dataset.select(&keep), kept: keep, removed })
}

/// Teacher logits for a whole dataset, computed in chunks.
pub fn predict_logits(params: &NetworkParams, features: ArrayView2<'_, f64>) -> Result<LogitsBatch> {
    const CHUNK: usize = 1024;
    let k = params.output_dim();
    let mut out = Array2::zeros((features.nrows(), k));
    let mut start = 0;
    while start < features.nrows() {
        let end = (start + CHUNK).min(features.nrows());
        let (logits, _) = forward(params, features.slice(ndarray::s![start..end, ..]))?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&logits);
        start = end;
    }
    LogitsBatch::new(out)
}

/// Runs the teacher over `dataset` and writes a TLGT file.
pub fn export_teacher_logits(teacher: &NetworkParams, dataset: &Dataset, path: &Path) -> Result<LogitsBatch> {
    if teacher.input_dim() != dataset.dim() {
        return Err(shape(format!(
            "teacher expects {} features, dataset has {}",
            teacher.input_dim(),
            dataset.dim()
        )));
    }
    let logits = predict_logits(teacher, dataset.features.view())?;
    format::write_matrix(path, Magic::TeacherLogits, &logits.values().to_owned())?;
    Ok(logits)
}

pub fn load_teacher_logits(path: &Path) -> Result<LogitsBatch> {
    LogitsBatch::new(format::read_matrix(path, Magic::TeacherLogits)?)
}

/// Per-class feature means, handy for nearest-center baselines.
pub fn class_means(dataset: &Dataset) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((dataset.k(), dataset.dim()));
    let mut counts = Array1::<f64>::zeros(dataset.k());
    for (row, &y) in dataset.features.rows().into_iter().zip(dataset.labels.as_slice()) {
        let mut s = sums.row_mut(y);
        s += &row;
        counts[y] += 1.0;
    }
    for (mut s, &c) in sums.rows_mut().into_iter().zip(counts.iter()) {
        if c > 0.0 {
            s /= c;
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjustment::find_misjudged;
    use std::collections::HashSet;

    fn small() -> SyntheticParams {
        SyntheticParams { n_per_class: 40, k: 4, d: 6, spread: 0.3, seed: 11 }
    }

    fn nearest_center_accuracy(centers: &Array2<f64>, ds: &Dataset) -> f64 {
        let mut correct = 0;
        for (x, &y) in ds.features.rows().into_iter().zip(ds.labels.as_slice()) {
            let best = (0..centers.nrows())
                .map(|c| {
                    let d = &x - &centers.row(c);
                    (c, d.dot(&d))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            correct += usize::from(best == y);
        }
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn splits_are_70_15_15_and_disjoint() {
        let s = gen_synthetic(&small()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (112, 24, 24));
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for &id in &s.get(split).ids {
                assert!(seen.insert(id));
            }
        }
        assert_eq!(seen.len(), 160);
    }

    #[test]
    fn zero_spread_is_perfectly_separable() {
        let p = SyntheticParams { spread: 0.0, ..small() };
        let s = gen_synthetic(&p).unwrap();
        let centers = class_means(&s.train);
        for split in Split::ALL {
            assert_eq!(nearest_center_accuracy(&centers, s.get(split)), 1.0);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        gen_synthetic(&small()).unwrap().save(&a).unwrap();
        gen_synthetic(&small()).unwrap().save(&b).unwrap();
        for split in Split::ALL {
            for ext in ["dset", "lbls"] {
                let name = format!("{split}.{ext}");
                assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
            }
        }
        let other = gen_synthetic(&SyntheticParams { seed: 12, ..small() }).unwrap();
        assert_ne!(other.train.features, gen_synthetic(&small()).unwrap().train.features);
    }

    #[test]
    fn invalid_dims_are_rejected() {
        assert!(gen_synthetic(&SyntheticParams { k: 1, ..small() }).is_err());
        assert!(gen_synthetic(&SyntheticParams { d: 1, ..small() }).is_err());
        assert!(gen_synthetic(&SyntheticParams { spread: -1.0, ..small() }).is_err());
    }

    #[test]
    fn dataset_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = gen_synthetic(&small()).unwrap();
        s.save(dir.path()).unwrap();
        let back = Splits::load(dir.path()).unwrap();
        assert_eq!(back.val.labels, s.val.labels);
        for (a, b) in s.val.features.iter().zip(back.val.features.iter()) {
            assert_eq!(*a as f32 as f64, *b);
        }
    }

    #[test]
    fn batches_cover_every_id_once() {
        let s = gen_synthetic(&small()).unwrap();
        let bs = batches(&s.train, 25, 3, 0).unwrap();
        assert_eq!(bs.len(), 5);
        assert_eq!(bs.last().unwrap().rows.len(), 112 - 4 * 25);
        let mut ids: Vec<usize> = bs.iter().flat_map(|b| b.ids.clone()).collect();
        ids.sort_unstable();
        let mut expected = s.train.ids.clone();
        expected.sort_unstable();
        assert_eq!(ids, expected);
        assert_ne!(
            batches(&s.train, 25, 3, 0).unwrap()[0].rows,
            batches(&s.train, 25, 3, 1).unwrap()[0].rows
        );
        assert!(batches(&s.train, 0, 3, 0).is_err());
    }

    #[test]
    fn oversized_batch_is_single_permuted_batch() {
        let s = gen_synthetic(&small()).unwrap();
        let bs = batches(&s.val, 1000, 5, 2).unwrap();
        assert_eq!(bs.len(), 1);
        let mut rows = bs[0].rows.clone();
        assert_ne!(rows, (0..24).collect::<Vec<_>>());
        rows.sort_unstable();
        assert_eq!(rows, (0..24).collect::<Vec<_>>());
    }

    fn logits_for(labels: &[usize], k: usize, wrong: impl Fn(usize) -> bool) -> LogitsBatch {
        let mut m = Array2::zeros((labels.len(), k));
        for (i, &y) in labels.iter().enumerate() {
            let c = if wrong(i) { (y + 1) % k } else { y };
            m[[i, c]] = 5.0;
        }
        LogitsBatch::new(m).unwrap()
    }

    #[test]
    fn filter_cases() {
        let s = gen_synthetic(&small()).unwrap();
        let ds = &s.val;
        let labels = ds.labels.as_slice();

        let all_right = filter_misjudged(ds, &logits_for(labels, 4, |_| false)).unwrap();
        assert_eq!(all_right.dataset, *ds);
        assert_eq!(all_right.removed, 0);

        let all_wrong = filter_misjudged(ds, &logits_for(labels, 4, |_| true)).unwrap();
        assert!(all_wrong.dataset.is_empty());
        assert_eq!(all_wrong.removed, ds.len());

        let t = logits_for(labels, 4, |i| i % 3 == 0);
        let some = filter_misjudged(ds, &t).unwrap();
        let (mask, _) = find_misjudged(&t, &ds.labels).unwrap();
        assert_eq!(some.removed, mask.iter().filter(|&&m| m).count());
        // subsequence of the input
        let mut it = ds.ids.iter();
        assert!(some.dataset.ids.iter().all(|id| it.any(|x| x == id)));

        let short = LogitsBatch::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        assert!(filter_misjudged(ds, &short).is_err());
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "x0,x1,label\n0.5,1.5,0\n-1,2,2\n").unwrap();
        let ds = Dataset::from_csv(&path, Split::Train, None).unwrap();
        assert_eq!(ds.k(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels.as_slice(), &[0, 2]);
        assert_eq!(ds.features[[1, 1]], 2.0);
        std::fs::write(&path, "x0,x1\n0.5,1.5\n").unwrap();
        assert!(Dataset::from_csv(&path, Split::Train, None).is_err());
    }
}
