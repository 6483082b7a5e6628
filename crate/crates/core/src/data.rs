//! Desk-scale datasets, CSV ingestion, label-noise injection and batching.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;
pub const DEFAULT_BATCH_SIZE: usize = 128;

const STREAM_FEATURES: u64 = 0xDA7A;
const STREAM_NOISE: u64 = 0x4015E;
const STREAM_BATCH: u64 = 0xBA7C;
const STREAM_SPLIT: u64 = 0x5B117;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    GaussianBlobs,
    ConcentricRings,
    TwoMoonsLike,
}

impl FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" | "gaussian_blobs" => Ok(Self::GaussianBlobs),
            "rings" | "concentric_rings" => Ok(Self::ConcentricRings),
            "moons" | "two_moons_like" => Ok(Self::TwoMoonsLike),
            other => Err(Error::invalid("dataset", format!("unknown synthetic kind `{other}`"))),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GaussianBlobs => "gaussian_blobs",
            Self::ConcentricRings => "concentric_rings",
            Self::TwoMoonsLike => "two_moons_like",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// How replacement labels are drawn for selected samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Uniform over all `C` classes; the true label may be kept.
    IncludeTrue,
    /// Uniform over the `C − 1` other classes; always a flip.
    ExcludeTrue,
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "include_true" => Ok(Self::IncludeTrue),
            "exclude_true" => Ok(Self::ExcludeTrue),
            other => Err(Error::invalid("criterion", format!("unknown criterion `{other}`"))),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::IncludeTrue => "include_true",
            Self::ExcludeTrue => "exclude_true",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub rate: f64,
    pub criterion: Criterion,
    pub seed: u64,
}

impl NoiseSpec {
    /// Number of training samples selected for relabeling, `round_half_up(rate · n)`.
    pub fn selected_count(&self, n_train: usize) -> usize {
        (self.rate * n_train as f64 + 0.5).floor() as usize
    }
}

/// Generator knobs for the synthetic datasets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticOptions {
    pub val_fraction: f64,
    /// Spread of blob centers (standard deviation per coordinate).
    pub center_spread: f64,
    /// Within-class standard deviation (blobs), radial/arc jitter otherwise.
    pub noise_std: f64,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self { val_fraction: DEFAULT_VALIDATION_FRACTION, center_spread: 0.75, noise_std: 1.0 }
    }
}

/// Feature matrix with observed labels, hidden true labels and the corruption
/// mask. True labels and the mask are reachable only through
/// [`NoisyDataset::evaluation_view`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    features: Vec<f64>,
    dim: usize,
    classes: usize,
    observed_labels: Vec<usize>,
    true_labels: Vec<usize>,
    corruption_mask: Vec<bool>,
    split: Vec<Split>,
    seed: u64,
    noise: Option<NoiseSpec>,
}

/// Read-only access to ground truth for metrics.
#[derive(Debug, Clone, Copy)]
pub struct EvaluationView<'a> {
    pub true_labels: &'a [usize],
    pub corruption_mask: &'a [bool],
}

impl NoisyDataset {
    fn assemble(
        features: Vec<f64>,
        dim: usize,
        classes: usize,
        labels: Vec<usize>,
        split: Vec<Split>,
        seed: u64,
    ) -> Self {
        let n = labels.len();
        Self {
            features,
            dim,
            classes,
            observed_labels: labels.clone(),
            true_labels: labels,
            corruption_mask: vec![false; n],
            split,
            seed,
            noise: None,
        }
    }

    pub fn len(&self) -> usize {
        self.observed_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise(&self) -> Option<&NoiseSpec> {
        self.noise.as_ref()
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn observed_labels(&self) -> &[usize] {
        &self.observed_labels
    }

    pub fn split(&self) -> &[Split] {
        &self.split
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn evaluation_view(&self) -> EvaluationView<'_> {
        EvaluationView { true_labels: &self.true_labels, corruption_mask: &self.corruption_mask }
    }

    /// Stacks the rows at `idx` into a `len × D` tensor.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.features(i));
        }
        Tensor::matrix(idx.len(), self.dim, data).expect("sized")
    }

    pub fn gather_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.observed_labels[i]).collect()
    }

    /// Relabels a seeded selection of training samples; validation rows and
    /// features are never touched.
    pub fn inject_noise(&self, spec: NoiseSpec) -> Result<NoisyDataset> {
        if !(0.0..=1.0).contains(&spec.rate) {
            return Err(Error::invalid("rate", format!("{} outside [0, 1]", spec.rate)));
        }
        if spec.criterion == Criterion::ExcludeTrue && self.classes < 2 {
            return Err(Error::invalid("criterion", "exclude_true needs at least 2 classes"));
        }
        let train = self.indices(Split::Train);
        let count = spec.selected_count(train.len());
        let mut r = rng::stream(spec.seed, STREAM_NOISE, 0);
        let chosen = index::sample(&mut r, train.len(), count);
        let mut out = self.clone();
        out.observed_labels = self.true_labels.clone();
        for pos in chosen.iter() {
            let i = train[pos];
            let truth = self.true_labels[i];
            out.observed_labels[i] = match spec.criterion {
                Criterion::IncludeTrue => r.random_range(0..self.classes),
                Criterion::ExcludeTrue => {
                    let k = r.random_range(0..self.classes - 1);
                    if k >= truth {
                        k + 1
                    } else {
                        k
                    }
                }
            };
        }
        out.corruption_mask = out.observed_labels.iter().zip(&out.true_labels).map(|(o, t)| o != t).collect();
        out.noise = Some(spec);
        Ok(out)
    }

    /// Writes a snapshot: one `#`-prefixed JSON header line, then a CSV of
    /// `split,true_label,observed_label,x0..x{D-1}`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = SnapshotHeader { n: self.len(), d: self.dim, c: self.classes, seed: self.seed, noise: self.noise };
        writeln!(f, "# {}", serde_json::to_string(&header)?)?;
        let mut cols = vec!["split".to_string(), "true_label".into(), "observed_label".into()];
        cols.extend((0..self.dim).map(|k| format!("x{k}")));
        writeln!(f, "{}", cols.join(","))?;
        for i in 0..self.len() {
            let s = match self.split[i] {
                Split::Train => "train",
                Split::Validation => "validation",
            };
            write!(f, "{s},{},{}", self.true_labels[i], self.observed_labels[i])?;
            for v in self.features(i) {
                write!(f, ",{v}")?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NoisyDataset> {
        let name = path.display().to_string();
        let perr =
            |line: usize, column: usize, reason: String| Error::Parse { path: name.clone(), line, column, reason };
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let first = lines.next().ok_or_else(|| perr(1, 1, "empty snapshot".into()))??;
        let json = first.strip_prefix('#').ok_or_else(|| perr(1, 1, "missing `#` header line".into()))?;
        let header: SnapshotHeader = serde_json::from_str(json.trim()).map_err(|e| perr(1, 1, e.to_string()))?;
        let _columns = lines.next().ok_or_else(|| perr(2, 1, "missing column header".into()))??;
        let mut features = Vec::with_capacity(header.n * header.d);
        let (mut truth, mut observed, mut split) = (Vec::new(), Vec::new(), Vec::new());
        for (k, line) in lines.enumerate() {
            let line = line?;
            let lineno = k + 3;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.d + 3 {
                return Err(perr(lineno, cells.len(), format!("expected {} cells", header.d + 3)));
            }
            split.push(match cells[0] {
                "train" => Split::Train,
                "validation" => Split::Validation,
                other => return Err(perr(lineno, 1, format!("unknown split `{other}`"))),
            });
            let label = |col: usize| -> Result<usize> {
                let v: usize =
                    cells[col].parse().map_err(|_| perr(lineno, col + 1, format!("bad label `{}`", cells[col])))?;
                if v >= header.c {
                    return Err(perr(lineno, col + 1, format!("label {v} ≥ class count {}", header.c)));
                }
                Ok(v)
            };
            truth.push(label(1)?);
            observed.push(label(2)?);
            for (j, cell) in cells[3..].iter().enumerate() {
                features.push(cell.parse::<f64>().map_err(|_| perr(lineno, j + 4, format!("bad number `{cell}`")))?);
            }
        }
        if truth.len() != header.n {
            return Err(perr(0, 0, format!("header says {} rows, found {}", header.n, truth.len())));
        }
        let corruption_mask = observed.iter().zip(&truth).map(|(o, t)| o != t).collect();
        Ok(NoisyDataset {
            features,
            dim: header.d,
            classes: header.c,
            observed_labels: observed,
            true_labels: truth,
            corruption_mask,
            split,
            seed: header.seed,
            noise: header.noise,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotHeader {
    n: usize,
    d: usize,
    c: usize,
    seed: u64,
    noise: Option<NoiseSpec>,
}

/// Per-column standardization with statistics from `reference` rows; columns
/// with (near) zero spread become all zeros.
fn standardize(features: &mut [f64], dim: usize, reference: &[usize]) {
    let n = reference.len().max(1) as f64;
    for k in 0..dim {
        let mean = reference.iter().map(|&i| features[i * dim + k]).sum::<f64>() / n;
        let var = reference.iter().map(|&i| (features[i * dim + k] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let scale = if sd > 1e-12 { 1.0 / sd } else { 0.0 };
        for row in features.chunks_exact_mut(dim) {
            row[k] = (row[k] - mean) * scale;
        }
    }
}

/// Size of the benchmark blob problem.
pub const BENCH_SAMPLES: usize = 10_000;
pub const BENCH_DIM: usize = 16;
pub const BENCH_CLASSES: usize = 10;

/// The benchmark: overlapping Gaussian blobs, 10,000 samples in 16 dimensions
/// over 10 classes, split 80/20.
pub fn benchmark_blobs(seed: u64) -> Result<NoisyDataset> {
    make_synthetic(SyntheticKind::GaussianBlobs, BENCH_SAMPLES, BENCH_DIM, BENCH_CLASSES, seed)
}

/// Class-balanced synthetic dataset with default options.
pub fn make_synthetic(kind: SyntheticKind, n: usize, dim: usize, classes: usize, seed: u64) -> Result<NoisyDataset> {
    make_synthetic_with(kind, n, dim, classes, seed, SyntheticOptions::default())
}

pub fn make_synthetic_with(
    kind: SyntheticKind,
    n: usize,
    dim: usize,
    classes: usize,
    seed: u64,
    opts: SyntheticOptions,
) -> Result<NoisyDataset> {
    if classes < 2 {
        return Err(Error::invalid("classes", format!("need at least 2, got {classes}")));
    }
    if n < classes * 10 {
        return Err(Error::invalid("n", format!("need at least 10 samples per class ({}), got {n}", classes * 10)));
    }
    if dim == 0 || (kind == SyntheticKind::TwoMoonsLike && dim < 2) {
        return Err(Error::invalid("dim", format!("{dim} too small for {kind}")));
    }
    if !(0.0..1.0).contains(&opts.val_fraction) {
        return Err(Error::invalid("val_fraction", format!("{} outside [0, 1)", opts.val_fraction)));
    }
    let mut r = rng::stream(seed, STREAM_FEATURES, kind as u64);
    let gauss = |r: &mut rng::Rng| -> f64 { StandardNormal.sample(r) };

    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut features = Vec::with_capacity(n * dim);
    match kind {
        SyntheticKind::GaussianBlobs => {
            let centers: Vec<f64> = (0..classes * dim).map(|_| opts.center_spread * gauss(&mut r)).collect();
            for &c in &labels {
                for k in 0..dim {
                    features.push(centers[c * dim + k] + opts.noise_std * gauss(&mut r));
                }
            }
        }
        SyntheticKind::ConcentricRings => {
            for &c in &labels {
                let dir: Vec<f64> = (0..dim).map(|_| gauss(&mut r)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let radius = 1.0 + c as f64 + 0.1 * opts.noise_std * gauss(&mut r);
                features.extend(dir.iter().map(|v| v / norm * radius));
            }
        }
        SyntheticKind::TwoMoonsLike => {
            for &c in &labels {
                let t = r.random_range(0.0..std::f64::consts::PI);
                let shift = 2.5 * (c / 2) as f64;
                let (x, y) =
                    if c % 2 == 0 { (t.cos() + shift, t.sin()) } else { (1.0 - t.cos() + shift, 0.5 - t.sin()) };
                let jitter = 0.1 * opts.noise_std;
                features.push(x + jitter * gauss(&mut r));
                features.push(y + jitter * gauss(&mut r));
                for _ in 2..dim {
                    features.push(jitter * gauss(&mut r));
                }
            }
        }
    }

    // last ⌊count_c · f⌋ members of every class go to validation
    let mut split = vec![Split::Train; n];
    for c in 0..classes {
        let members: Vec<usize> = (c..n).step_by(classes).collect();
        let n_val = (members.len() as f64 * opts.val_fraction).floor() as usize;
        for &i in &members[members.len() - n_val..] {
            split[i] = Split::Validation;
        }
    }
    let all: Vec<usize> = (0..n).collect();
    standardize(&mut features, dim, &all);
    Ok(NoisyDataset::assemble(features, dim, classes, labels, split, seed))
}

/// Options for [`ingest_tabular`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TabularOptions {
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TabularOptions {
    fn default() -> Self {
        Self { val_fraction: DEFAULT_VALIDATION_FRACTION, seed: 0 }
    }
}

/// Reads a headed CSV with numeric features and one label column (by name, or
/// by zero-based index when no header matches).
pub fn ingest_tabular(path: &Path, label_column: &str, opts: TabularOptions) -> Result<NoisyDataset> {
    let name = path.display().to_string();
    let perr = |line: usize, column: usize, reason: String| Error::Parse { path: name.clone(), line, column, reason };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .or_else(|| label_column.parse::<usize>().ok().filter(|&i| i < headers.len()))
        .ok_or_else(|| perr(1, 0, format!("label column `{label_column}` not found")))?;
    let width = headers.len();
    if width < 2 {
        return Err(perr(1, 0, "need at least one feature column besides the label".into()));
    }
    let dim = width - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut mapping: HashMap<String, usize> = HashMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        if rec.len() != width {
            return Err(perr(line, rec.len(), format!("ragged row: expected {width} cells, found {}", rec.len())));
        }
        for (j, cell) in rec.iter().enumerate() {
            if j == label_idx {
                let next = mapping.len();
                labels.push(*mapping.entry(cell.to_string()).or_insert(next));
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    perr(line, j + 1, format!("non-numeric feature `{cell}` in column `{}`", &headers[j]))
                })?;
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(perr(1, 0, "no data rows".into()));
    }
    if mapping.len() < 2 {
        return Err(perr(1, label_idx + 1, "label column has a single class".into()));
    }
    let n = labels.len();
    let n_val = (n as f64 * opts.val_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(opts.seed, STREAM_SPLIT, 0));
    let mut split = vec![Split::Train; n];
    for &i in &order[..n_val] {
        split[i] = Split::Validation;
    }
    let train: Vec<usize> = (0..n).filter(|&i| split[i] == Split::Train).collect();
    standardize(&mut features, dim, &train);
    Ok(NoisyDataset::assemble(features, dim, mapping.len(), labels, split, opts.seed))
}

/// Seeded per-epoch shuffle of `train` into batches; the last short batch is
/// kept. With `mixup`, a trailing single-row batch is folded into the previous
/// one so every batch can be paired.
pub fn batches(train: &[usize], batch_size: usize, seed: u64, epoch: usize, mixup: bool) -> Result<Vec<Vec<usize>>> {
    if train.is_empty() {
        return Err(Error::invalid("train", "empty training split"));
    }
    if batch_size == 0 || (mixup && batch_size < 2) {
        return Err(Error::invalid(
            "batch_size",
            format!("{batch_size} too small{}", if mixup { " for mixup pairing" } else { "" }),
        ));
    }
    let mut order = train.to_vec();
    order.shuffle(&mut rng::stream(seed, STREAM_BATCH, epoch as u64));
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if mixup && out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(tail);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_balanced_and_standardized() {
        let ds = make_synthetic(SyntheticKind::GaussianBlobs, 100, 4, 10, 3).unwrap();
        let mut counts = [0usize; 10];
        ds.observed_labels().iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().all(|&c| c == 10));
        for k in 0..4 {
            let col: Vec<f64> = (0..100).map(|i| ds.features(i)[k]).collect();
            let m = col.iter().sum::<f64>() / 100.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 100.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn synthetic_kinds_are_deterministic() {
        for kind in [SyntheticKind::GaussianBlobs, SyntheticKind::ConcentricRings, SyntheticKind::TwoMoonsLike] {
            let a = make_synthetic(kind, 200, 3, 4, 9).unwrap();
            let b = make_synthetic(kind, 200, 3, 4, 9).unwrap();
            assert_eq!(a, b);
            let c = make_synthetic(kind, 200, 3, 4, 10).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        assert!(make_synthetic(SyntheticKind::GaussianBlobs, 100, 4, 1, 0).is_err());
        assert!(make_synthetic(SyntheticKind::GaussianBlobs, 99, 4, 10, 0).is_err());
        assert!(make_synthetic(SyntheticKind::TwoMoonsLike, 100, 1, 2, 0).is_err());
    }

    #[test]
    fn validation_split_is_stratified() {
        let ds = make_synthetic(SyntheticKind::GaussianBlobs, 1000, 2, 10, 0).unwrap();
        let val = ds.indices(Split::Validation);
        assert_eq!(val.len(), 200);
        let mut counts = [0usize; 10];
        val.iter().for_each(|&i| counts[ds.observed_labels()[i]] += 1);
        assert!(counts.iter().all(|&c| c == 20));
    }

    #[test]
    fn zero_rate_noise_changes_nothing() {
        let ds = make_synthetic(SyntheticKind::GaussianBlobs, 200, 2, 4, 0).unwrap();
        let noisy = ds.inject_noise(NoiseSpec { rate: 0.0, criterion: Criterion::IncludeTrue, seed: 1 }).unwrap();
        assert_eq!(noisy.observed_labels(), ds.observed_labels());
        assert!(noisy.evaluation_view().corruption_mask.iter().all(|m| !m));
    }

    #[test]
    fn noise_rate_must_be_a_fraction() {
        let ds = make_synthetic(SyntheticKind::GaussianBlobs, 200, 2, 4, 0).unwrap();
        assert!(ds.inject_noise(NoiseSpec { rate: 1.2, criterion: Criterion::IncludeTrue, seed: 1 }).is_err());
        assert!(ds.inject_noise(NoiseSpec { rate: -0.1, criterion: Criterion::IncludeTrue, seed: 1 }).is_err());
    }

    #[test]
    fn noise_leaves_features_and_validation() {
        let ds = make_synthetic(SyntheticKind::GaussianBlobs, 500, 3, 5, 0).unwrap();
        let noisy = ds.inject_noise(NoiseSpec { rate: 0.9, criterion: Criterion::ExcludeTrue, seed: 4 }).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.features(i), noisy.features(i));
            if ds.split()[i] == Split::Validation {
                assert_eq!(ds.observed_labels()[i], noisy.observed_labels()[i]);
            }
        }
        let view = noisy.evaluation_view();
        for i in 0..noisy.len() {
            assert_eq!(view.corruption_mask[i], noisy.observed_labels()[i] != view.true_labels[i]);
        }
    }

    #[test]
    fn rounding_is_half_up() {
        let s = NoiseSpec { rate: 0.5, criterion: Criterion::ExcludeTrue, seed: 0 };
        assert_eq!(s.selected_count(5), 3);
        assert_eq!(s.selected_count(1000), 500);
    }

    #[test]
    fn batch_sizes_and_coverage() {
        let train: Vec<usize> = (0..300).collect();
        let b = batches(&train, 128, 7, 1, false).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![128, 128, 44]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, train);
        assert_eq!(b, batches(&train, 128, 7, 1, false).unwrap());
        assert_ne!(b, batches(&train, 128, 7, 2, false).unwrap());
    }

    #[test]
    fn mixup_batches_never_leave_a_singleton() {
        let train: Vec<usize> = (0..257).collect();
        let b = batches(&train, 128, 0, 0, true).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![128, 129]);
        assert!(batches(&train, 1, 0, 0, true).is_err());
        assert!(batches(&train, 1, 0, 0, false).is_ok());
    }
}
