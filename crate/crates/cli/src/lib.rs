//! Experiment runner: single runs, variant × noise × seed matrices and
//! mixture fits over dumped loss traces.

pub mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use noisylab_core::data::{self, TabularOptions};
use noisylab_core::mixture::{self, BetaMixture, GaussMixture};
use noisylab_core::nn::Activation;
use noisylab_core::trainer::{self, RunOutput, TraceRow};
use noisylab_core::{metrics, Mlp, NoiseSpec, NoisyDataset, RunSummary, TrainPlan, Variant};

pub use config::{DatasetSource, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io(_) => EXIT_IO,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<noisylab_core::Error> for CliError {
    fn from(e: noisylab_core::Error) -> Self {
        use noisylab_core::Error as E;
        match e {
            E::InvalidArgument { .. } => CliError::Usage(e.to_string()),
            E::Io(_) | E::Csv(_) | E::Json(_) | E::Parse { .. } => CliError::Io(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "noisylab", version, about = "Label-noise training experiments on a small MLP")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration and write its metrics.
    Run(RunArgs),
    /// Train every variant × noise × seed combination.
    Matrix(RunArgs),
    /// Fit beta and Gaussian mixtures to a dumped loss trace.
    FitTrace(FitTraceArgs),
}

/// Flags override values read from `--config`.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Variant name(s), comma separated for `matrix`.
    #[arg(long, value_delimiter = ',')]
    pub variant: Vec<String>,
    /// blobs, rings, moons or csv.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub csv_path: Option<PathBuf>,
    /// Label column, by header name or zero-based index.
    #[arg(long)]
    pub label_col: Option<String>,
    /// Noise rate(s) in [0, 1].
    #[arg(long, value_delimiter = ',')]
    pub noise: Vec<f64>,
    /// include_true or exclude_true.
    #[arg(long)]
    pub criterion: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub alpha_mixup: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Epochs between mixture refits; fractions refit mid-epoch.
    #[arg(long)]
    pub refit_period: Option<f64>,
    #[arg(long)]
    pub em_iters: Option<usize>,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Vec<usize>,
    /// Synthetic sample count.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Seed(s); defaults to $NOISYLAB_SEED, then 0.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Epochs whose per-sample losses go to loss_trace.csv.
    #[arg(long, value_delimiter = ',')]
    pub trace_epochs: Vec<usize>,
    /// Epoch at which the target temperature bottoms out (MD-DYR-SH only).
    #[arg(long)]
    pub temp_decay_end: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitTraceArgs {
    /// Loss-trace CSV written by `run --trace-epochs`.
    pub trace: PathBuf,
    /// Epoch to fit; defaults to the last one in the file.
    #[arg(long)]
    pub epoch: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, default_value_t = mixture::DEFAULT_EM_ITERS)]
    pub em_iters: usize,
}

impl RunArgs {
    /// Config file (if any), then the seed environment variable, then flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::parse(&fs::read_to_string(p).map_err(io_at(p))?)?,
            None => RunConfig::default(),
        };
        let file_sets_seed = match &self.config {
            Some(p) => {
                fs::read_to_string(p)?.lines().any(|l| l.split_once('=').is_some_and(|(k, _)| k.trim() == "seed"))
            }
            None => false,
        };
        if !file_sets_seed {
            if let Ok(v) = std::env::var(config::SEED_ENV) {
                cfg.set("seed", &v)?;
            }
        }
        if !self.variant.is_empty() {
            cfg.set("variant", &self.variant.join(","))?;
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = config::parse_dataset(d)?;
        }
        if let Some(p) = &self.csv_path {
            cfg.csv_path = Some(p.clone());
            if self.dataset.is_none() {
                cfg.dataset = DatasetSource::Csv;
            }
        }
        if let Some(l) = &self.label_col {
            cfg.label_col = Some(l.clone());
        }
        if !self.noise.is_empty() {
            cfg.noise_rates = self.noise.clone();
        }
        if let Some(c) = &self.criterion {
            cfg.set("criterion", c)?;
        }
        macro_rules! take {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        take!(lr => cfg.lr, batch_size => cfg.batch_size, alpha_mixup => cfg.alpha_mixup, eta => cfg.eta,
              refit_period => cfg.refit_period, em_iters => cfg.em_iters, samples => cfg.samples,
              dim => cfg.dim, classes => cfg.classes, workers => cfg.workers);
        if self.epochs.is_some() {
            cfg.epochs = self.epochs;
        }
        if self.temp_decay_end.is_some() {
            cfg.temp_decay_end = self.temp_decay_end;
        }
        if !self.hidden.is_empty() {
            cfg.hidden = self.hidden.clone();
        }
        if !self.seed.is_empty() {
            cfg.seeds = self.seed.clone();
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if !self.trace_epochs.is_empty() {
            cfg.trace_epochs = self.trace_epochs.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Training plan for one combination, with config overrides applied.
pub fn plan_for(cfg: &RunConfig, variant: Variant, seed: u64) -> Result<TrainPlan, CliError> {
    let epochs = cfg.epochs.unwrap_or(if variant.uses_mixup() { 60 } else { 30 });
    let mut plan = TrainPlan::desk(variant, epochs, seed);
    plan.lr.initial = cfg.lr;
    plan.batch_size = cfg.batch_size;
    plan.mixup_alpha = cfg.alpha_mixup;
    plan.eta = cfg.eta;
    plan.refit_period_epochs = cfg.refit_period;
    plan.em_iters = cfg.em_iters;
    plan.trace_epochs = cfg.trace_epochs.clone();
    if let Some(t) = cfg.temp_decay_end {
        plan.temp_decay_end_epoch = t;
    }
    if let Some(&e) = cfg.trace_epochs.iter().find(|&&e| e == 0 || e > epochs) {
        return Err(CliError::Usage(format!("trace_epochs: epoch {e} outside 1..={epochs}")));
    }
    plan.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(plan)
}

/// Clean dataset for `seed` with `rate` noise injected.
pub fn dataset_for(cfg: &RunConfig, rate: f64, seed: u64) -> Result<NoisyDataset, CliError> {
    let base = match cfg.dataset {
        DatasetSource::Synthetic(kind) => data::make_synthetic(kind, cfg.samples, cfg.dim, cfg.classes, seed)?,
        DatasetSource::Csv => {
            let path = cfg.csv_path.as_ref().expect("validated");
            let label = cfg.label_col.as_deref().expect("validated");
            data::ingest_tabular(path, label, TabularOptions { seed, ..TabularOptions::default() })?
        }
    };
    Ok(base.inject_noise(NoiseSpec { rate, criterion: cfg.criterion, seed })?)
}

pub fn model_for(cfg: &RunConfig, dataset: &NoisyDataset, seed: u64) -> Result<Mlp, CliError> {
    Ok(Mlp::new(dataset.dim(), &cfg.hidden, dataset.classes(), Activation::Relu, seed)?)
}

/// Trains one configuration and writes `metrics.csv`, `summary.json`,
/// `config.txt` and, when requested, `loss_trace.csv` into `dir`.
pub fn execute(cfg: &RunConfig, plan: &TrainPlan, dataset: &NoisyDataset, dir: &Path) -> Result<RunOutput, CliError> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let mut model = model_for(cfg, dataset, plan.seed)?;
    let out = trainer::run(plan, dataset, &mut model)?;

    let create = |name: &str| -> Result<BufWriter<fs::File>, CliError> {
        let p = dir.join(name);
        Ok(BufWriter::new(fs::File::create(&p).map_err(io_at(&p))?))
    };
    let mut w = create("metrics.csv")?;
    trainer::write_metrics_csv(&mut w, plan, dataset, &out.epochs)?;
    w.flush()?;
    let mut w = create("summary.json")?;
    serde_json::to_writer_pretty(&mut w, &out.summary).map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    if !plan.trace_epochs.is_empty() {
        let mut w = create("loss_trace.csv")?;
        trainer::write_loss_trace(&mut w, &out.trace)?;
        w.flush()?;
    }
    let single = RunConfig {
        variants: vec![plan.variant],
        noise_rates: vec![dataset.noise().map_or(0.0, |n| n.rate)],
        seeds: vec![plan.seed],
        out: dir.to_path_buf(),
        ..cfg.clone()
    };
    fs::write(dir.join("config.txt"), single.render()).map_err(io_at(dir))?;
    Ok(out)
}

fn summary_line(s: &RunSummary) -> String {
    let auc = s.final_auc.map_or("n/a".into(), |a| format!("{a:.4}"));
    let mut line = format!(
        "{} noise={} seed={}: best {:.2}% (epoch {}), last {:.2}%, auc {auc}",
        s.variant,
        s.noise_rate,
        s.seed,
        100.0 * s.best_accuracy,
        s.best_epoch,
        100.0 * s.last_accuracy
    );
    if let Some(e) = s.diverged_at {
        line.push_str(&format!(", diverged at epoch {e}"));
    }
    line
}

pub fn cmd_run(args: &RunArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    if cfg.variants.len() != 1 || cfg.noise_rates.len() != 1 || cfg.seeds.len() != 1 {
        return Err(CliError::Usage("run takes a single variant, noise rate and seed; use matrix for lists".into()));
    }
    let (variant, rate, seed) = (cfg.variants[0], cfg.noise_rates[0], cfg.seeds[0]);
    let plan = plan_for(&cfg, variant, seed)?;
    let dataset = dataset_for(&cfg, rate, seed)?;
    let out = execute(&cfg, &plan, &dataset, &cfg.out)?;
    writeln!(stdout, "{}", summary_line(&out.summary))?;
    Ok(())
}

/// Child directory of one matrix cell.
pub fn run_dir(root: &Path, variant: Variant, rate: f64, seed: u64) -> PathBuf {
    root.join(format!("{variant}_noise{rate}_seed{seed}"))
}

/// Mean best/last accuracy over seeds for one (variant, noise) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub variant: Variant,
    pub noise_rate: f64,
    pub seeds: usize,
    pub best_mean: f64,
    pub last_mean: f64,
}

pub fn aggregate(summaries: &[RunSummary], variants: &[Variant], rates: &[f64]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for &v in variants {
        for &r in rates {
            let cell: Vec<&RunSummary> = summaries.iter().filter(|s| s.variant == v && s.noise_rate == r).collect();
            if cell.is_empty() {
                continue;
            }
            let n = cell.len() as f64;
            rows.push(AggregateRow {
                variant: v,
                noise_rate: r,
                seeds: cell.len(),
                best_mean: cell.iter().map(|s| s.best_accuracy).sum::<f64>() / n,
                last_mean: cell.iter().map(|s| s.last_accuracy).sum::<f64>() / n,
            });
        }
    }
    rows
}

pub fn cmd_matrix(args: &RunArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = args.resolve()?;
    let mut jobs = Vec::new();
    for &v in &cfg.variants {
        for &r in &cfg.noise_rates {
            for &s in &cfg.seeds {
                jobs.push((v, r, s, plan_for(&cfg, v, s)?));
            }
        }
    }
    let mut datasets = BTreeMap::new();
    for &r in &cfg.noise_rates {
        for &s in &cfg.seeds {
            datasets.insert((r.to_bits(), s), dataset_for(&cfg, r, s)?);
        }
    }
    fs::create_dir_all(&cfg.out).map_err(io_at(&cfg.out))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Usage(format!("workers: {e}")))?;
    let results: Vec<Result<RunSummary, CliError>> = pool.install(|| {
        jobs.par_iter()
            .map(|(v, r, s, plan)| {
                let ds = &datasets[&(r.to_bits(), *s)];
                execute(&cfg, plan, ds, &run_dir(&cfg.out, *v, *r, *s)).map(|o| o.summary)
            })
            .collect()
    });
    let summaries: Vec<RunSummary> = results.into_iter().collect::<Result<_, _>>()?;
    for s in &summaries {
        writeln!(stdout, "{}", summary_line(s))?;
    }

    let rows = aggregate(&summaries, &cfg.variants, &cfg.noise_rates);
    let path = cfg.out.join("aggregate.csv");
    let mut w = BufWriter::new(fs::File::create(&path).map_err(io_at(&path))?);
    writeln!(w, "variant,noise_rate,seeds,best_mean,last_mean")?;
    for r in &rows {
        writeln!(w, "{},{},{},{},{}", r.variant, r.noise_rate, r.seeds, r.best_mean, r.last_mean)?;
    }
    w.flush()?;

    // variant rows × noise columns, best/last in percent
    write!(stdout, "\n{:<10}", "Alg.")?;
    for r in &cfg.noise_rates {
        write!(stdout, " {:>13}", format!("{}%", 100.0 * r))?;
    }
    writeln!(stdout)?;
    for &v in &cfg.variants {
        write!(stdout, "{:<10}", v.name())?;
        for &rate in &cfg.noise_rates {
            let cell = rows.iter().find(|a| a.variant == v && a.noise_rate == rate).expect("every cell ran");
            write!(stdout, " {:>13}", format!("{:.1}/{:.1}", 100.0 * cell.best_mean, 100.0 * cell.last_mean))?;
        }
        writeln!(stdout)?;
    }
    Ok(())
}

/// Mixture fits of one epoch of a loss trace.
#[derive(Debug, Clone)]
pub struct TraceFit {
    pub epoch: usize,
    pub samples: usize,
    pub bmm: BetaMixture,
    pub gmm: GaussMixture,
    pub bmm_auc: Option<f64>,
    pub gmm_auc: Option<f64>,
    /// `(lo, hi, empirical density, bmm pdf, gmm pdf)` at bin centers.
    pub histogram: Vec<(f64, f64, f64, f64, f64)>,
}

pub fn fit_trace(rows: &[TraceRow], epoch: Option<usize>, bins: usize, em_iters: usize) -> Result<TraceFit, CliError> {
    if bins == 0 {
        return Err(CliError::Usage("bins: must be positive".into()));
    }
    let epoch = match epoch {
        Some(e) => e,
        None => rows.iter().map(|r| r.epoch).max().ok_or_else(|| CliError::Io("trace has no rows".into()))?,
    };
    let sel: Vec<&TraceRow> = rows.iter().filter(|r| r.epoch == epoch).collect();
    if sel.is_empty() {
        return Err(CliError::Usage(format!("epoch: no rows for epoch {epoch}")));
    }
    let obs: Vec<f64> = sel.iter().map(|r| r.normalized_loss).collect();
    let mask: Vec<bool> = sel.iter().map(|r| r.is_actually_noisy).collect();
    let bmm = mixture::fit_bmm(&obs, em_iters)?;
    let gmm = mixture::fit_gmm(&obs, em_iters)?;
    let (bmm_auc, gmm_auc) = if bmm.degenerate {
        (None, None)
    } else {
        let pb: Vec<f64> = obs.iter().map(|&x| bmm.posterior_noisy(x)).collect();
        let pg: Vec<f64> = obs.iter().map(|&x| gmm.posterior_noisy(x)).collect();
        (metrics::clean_noisy_auc(&pb, &mask)?, metrics::clean_noisy_auc(&pg, &mask)?)
    };
    let width = 1.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in &obs {
        counts[((x / width) as usize).min(bins - 1)] += 1;
    }
    let histogram = counts
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let (lo, hi) = (k as f64 * width, (k + 1) as f64 * width);
            let mid = 0.5 * (lo + hi);
            (lo, hi, c as f64 / (obs.len() as f64 * width), bmm.pdf(mid), gmm.pdf(mid))
        })
        .collect();
    Ok(TraceFit { epoch, samples: obs.len(), bmm, gmm, bmm_auc, gmm_auc, histogram })
}

pub fn cmd_fit_trace(args: &FitTraceArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let rows = trainer::read_loss_trace(&args.trace)?;
    let fit = fit_trace(&rows, args.epoch, args.bins, args.em_iters)?;
    let auc = |a: Option<f64>| a.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    let (b, g) = (&fit.bmm, &fit.gmm);
    writeln!(stdout, "epoch {} ({} samples)", fit.epoch, fit.samples)?;
    if b.degenerate {
        writeln!(stdout, "bmm: degenerate (all losses equal), symmetric fit")?;
    }
    for (name, k) in [("clean", b.clean_component), ("noisy", b.noisy_component())] {
        writeln!(
            stdout,
            "bmm {name}: lambda={:.4} alpha={:.4} beta={:.4} mean={:.4}",
            b.lambda[k],
            b.alpha[k],
            b.beta[k],
            b.mean(k)
        )?;
    }
    for (name, k) in [("clean", g.clean_component()), ("noisy", g.noisy_component())] {
        writeln!(stdout, "gmm {name}: lambda={:.4} mu={:.4} sigma2={:.6}", g.lambda[k], g.mu[k], g.sigma2[k])?;
    }
    writeln!(stdout, "bmm_auc={} gmm_auc={}", auc(fit.bmm_auc), auc(fit.gmm_auc))?;
    writeln!(stdout, "bin_lo,bin_hi,empirical,bmm_pdf,gmm_pdf")?;
    for (lo, hi, e, pb, pg) in &fit.histogram {
        writeln!(stdout, "{lo:.4},{hi:.4},{e:.6},{pb:.6},{pg:.6}")?;
    }
    Ok(())
}

/// Parses `args` and dispatches; returns the process exit code.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if code == EXIT_OK { write!(stdout, "{e}") } else { write!(stderr, "{e}") };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a, stdout),
        Command::Matrix(a) => cmd_matrix(a, stdout),
        Command::FitTrace(a) => cmd_fit_trace(a, stdout),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "noisylab: {e}");
            e.exit_code()
        }
    }
}
