//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use noisylab_core::data::{BENCH_CLASSES, BENCH_DIM, BENCH_SAMPLES};
use noisylab_core::nn::DEFAULT_HIDDEN;
use noisylab_core::{Criterion, SyntheticKind, Variant};

use crate::CliError;

pub const SEED_ENV: &str = "NOISYLAB_SEED";

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic(SyntheticKind),
    Csv,
}

/// Everything needed to launch one run or a matrix of runs. `variants`,
/// `noise_rates` and `seeds` hold one entry for `run` and lists for `matrix`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variants: Vec<Variant>,
    pub dataset: DatasetSource,
    pub csv_path: Option<PathBuf>,
    pub label_col: Option<String>,
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    pub noise_rates: Vec<f64>,
    pub criterion: Criterion,
    pub epochs: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub alpha_mixup: f64,
    pub eta: f64,
    pub refit_period: f64,
    pub em_iters: usize,
    pub hidden: Vec<usize>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub workers: usize,
    pub trace_epochs: Vec<usize>,
    pub temp_decay_end: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Ce],
            dataset: DatasetSource::Synthetic(SyntheticKind::GaussianBlobs),
            csv_path: None,
            label_col: None,
            samples: BENCH_SAMPLES,
            dim: BENCH_DIM,
            classes: BENCH_CLASSES,
            noise_rates: vec![0.0],
            criterion: Criterion::IncludeTrue,
            epochs: None,
            lr: 0.1,
            batch_size: noisylab_core::data::DEFAULT_BATCH_SIZE,
            alpha_mixup: noisylab_core::losses::MIXUP_ALPHA,
            eta: 1.0,
            refit_period: 1.0,
            em_iters: noisylab_core::mixture::DEFAULT_EM_ITERS,
            hidden: DEFAULT_HIDDEN.to_vec(),
            seeds: vec![0],
            out: PathBuf::from("noisylab-out"),
            workers: 1,
            trace_epochs: Vec::new(),
            temp_decay_end: None,
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| scalar(key, s)).collect()
}

fn scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.trim().parse().map_err(|_| CliError::Usage(format!("{key}: cannot parse `{}`", value.trim())))
}

pub fn parse_dataset(value: &str) -> Result<DatasetSource, CliError> {
    if value == "csv" {
        return Ok(DatasetSource::Csv);
    }
    value
        .parse::<SyntheticKind>()
        .map(DatasetSource::Synthetic)
        .map_err(|_| CliError::Usage(format!("dataset: unknown dataset `{value}`")))
}

impl RunConfig {
    /// Renders every key; [`RunConfig::parse`] inverts it.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let dataset = match &self.dataset {
            DatasetSource::Synthetic(k) => k.to_string(),
            DatasetSource::Csv => "csv".into(),
        };
        let opt = |v: Option<String>| v.unwrap_or_default();
        let pairs: Vec<(&str, String)> = vec![
            ("variant", join(&self.variants)),
            ("dataset", dataset),
            ("csv_path", opt(self.csv_path.as_ref().map(|p| p.display().to_string()))),
            ("label_col", opt(self.label_col.clone())),
            ("samples", self.samples.to_string()),
            ("dim", self.dim.to_string()),
            ("classes", self.classes.to_string()),
            ("noise", join(&self.noise_rates)),
            ("criterion", self.criterion.to_string()),
            ("epochs", opt(self.epochs.map(|e| e.to_string()))),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("alpha_mixup", self.alpha_mixup.to_string()),
            ("eta", self.eta.to_string()),
            ("refit_period", self.refit_period.to_string()),
            ("em_iters", self.em_iters.to_string()),
            ("hidden", join(&self.hidden)),
            ("seed", join(&self.seeds)),
            ("out", self.out.display().to_string()),
            ("workers", self.workers.to_string()),
            ("trace_epochs", join(&self.trace_epochs)),
            ("temp_decay_end", opt(self.temp_decay_end.map(|e| e.to_string()))),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses a config file over the defaults. Blank lines and `#` comments
    /// are skipped; an empty value clears an optional key.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let some = |v: &str| (!v.is_empty()).then(|| v.to_string());
        match key {
            "variant" => {
                self.variants = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse::<Variant>().map_err(|e| CliError::Usage(format!("variant: {e}"))))
                    .collect::<Result<_, _>>()?
            }
            "dataset" => self.dataset = parse_dataset(value)?,
            "csv_path" => self.csv_path = some(value).map(PathBuf::from),
            "label_col" => self.label_col = some(value),
            "samples" => self.samples = scalar(key, value)?,
            "dim" => self.dim = scalar(key, value)?,
            "classes" => self.classes = scalar(key, value)?,
            "noise" => self.noise_rates = list(key, value)?,
            "criterion" => {
                self.criterion = value.parse().map_err(|e| CliError::Usage(format!("criterion: {e}")))?;
            }
            "epochs" => self.epochs = some(value).map(|v| scalar(key, &v)).transpose()?,
            "lr" => self.lr = scalar(key, value)?,
            "batch_size" => self.batch_size = scalar(key, value)?,
            "alpha_mixup" => self.alpha_mixup = scalar(key, value)?,
            "eta" => self.eta = scalar(key, value)?,
            "refit_period" => self.refit_period = scalar(key, value)?,
            "em_iters" => self.em_iters = scalar(key, value)?,
            "hidden" => self.hidden = list(key, value)?,
            "seed" => self.seeds = list(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "workers" => self.workers = scalar(key, value)?,
            "trace_epochs" => self.trace_epochs = list(key, value)?,
            "temp_decay_end" => self.temp_decay_end = some(value).map(|v| scalar(key, &v)).transpose()?,
            other => return Err(CliError::Usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Checks cross-key consistency. Errors name the offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.variants.is_empty() {
            return usage("variant: list is empty".into());
        }
        if self.noise_rates.is_empty() {
            return usage("noise: list is empty".into());
        }
        if self.seeds.is_empty() {
            return usage("seed: list is empty".into());
        }
        if let Some(r) = self.noise_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return usage(format!("noise: {r} outside [0, 1]"));
        }
        match self.dataset {
            DatasetSource::Csv => {
                if self.csv_path.is_none() {
                    return usage("csv_path: required with dataset = csv".into());
                }
                if self.label_col.is_none() {
                    return usage("label_col: required with dataset = csv".into());
                }
            }
            DatasetSource::Synthetic(_) => {
                if self.csv_path.is_some() {
                    return usage("csv_path: conflicts with a synthetic dataset".into());
                }
                if self.label_col.is_some() {
                    return usage("label_col: conflicts with a synthetic dataset".into());
                }
            }
        }
        if self.temp_decay_end.is_some() {
            if let Some(v) = self.variants.iter().find(|v| !v.is_tempered()) {
                return usage(format!("temp_decay_end: variant {v} has no temperature decay"));
            }
        }
        if self.workers == 0 {
            return usage("workers: must be at least 1".into());
        }
        if self.hidden.contains(&0) {
            return usage("hidden: widths must be positive".into());
        }
        Ok(())
    }
}
