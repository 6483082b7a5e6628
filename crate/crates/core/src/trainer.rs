//! Training runs: warm-up, per-epoch mixture refits on plain cross-entropy,
//! variant-specific corrected objectives and metric collection.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{self, NoisyDataset, Split};
use crate::error::{Error, Result};
use crate::losses::{
    self, BatchTargets, BootstrapMode, DeltaSource, SoftTargets, MIXUP_ALPHA, STATIC_HARD_WEIGHT, STATIC_SOFT_WEIGHT,
};
use crate::metrics;
use crate::mixture::{self, BetaMixture, LossObservation};
use crate::nn::{argmax, softmax, Mlp, Sgd, Tape, Tensor};
use crate::rng;

const STREAM_MIXUP: u64 = 0x313C;
const EVAL_CHUNK: usize = 1024;
/// Final temperature of the soft-to-hard decay.
pub const FINAL_TEMPERATURE: f64 = 0.001;
/// Hidden widths of the benchmark model; wide enough to memorize noisy labels.
pub const BENCH_HIDDEN: [usize; 2] = [256, 256];
/// Bootstrapping weight of the fixed-weight ablation (0.8 label, 0.2 prediction).
pub const FIXED_WEIGHT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "ST-S")]
    StS,
    #[serde(rename = "ST-H")]
    StH,
    #[serde(rename = "DY-S")]
    DyS,
    #[serde(rename = "DY-H")]
    DyH,
    #[serde(rename = "M")]
    M,
    #[serde(rename = "M-DYR-S")]
    MDyrS,
    #[serde(rename = "M-DYR-H")]
    MDyrH,
    #[serde(rename = "MD-DYR-H")]
    MdDyrH,
    #[serde(rename = "MD-DYR-SH")]
    MdDyrSh,
    #[serde(rename = "FIXED-W")]
    FixedW,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Ce,
        Variant::StS,
        Variant::StH,
        Variant::DyS,
        Variant::DyH,
        Variant::M,
        Variant::MDyrS,
        Variant::MDyrH,
        Variant::MdDyrH,
        Variant::MdDyrSh,
        Variant::FixedW,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ce => "CE",
            Variant::StS => "ST-S",
            Variant::StH => "ST-H",
            Variant::DyS => "DY-S",
            Variant::DyH => "DY-H",
            Variant::M => "M",
            Variant::MDyrS => "M-DYR-S",
            Variant::MDyrH => "M-DYR-H",
            Variant::MdDyrH => "MD-DYR-H",
            Variant::MdDyrSh => "MD-DYR-SH",
            Variant::FixedW => "FIXED-W",
        }
    }

    pub fn uses_mixup(self) -> bool {
        matches!(
            self,
            Variant::M | Variant::MDyrS | Variant::MDyrH | Variant::MdDyrH | Variant::MdDyrSh | Variant::FixedW
        )
    }

    pub fn uses_dynamic_mixup(self) -> bool {
        matches!(self, Variant::MdDyrH | Variant::MdDyrSh)
    }

    pub fn is_tempered(self) -> bool {
        self == Variant::MdDyrSh
    }

    /// Whether any phase of the variant consults the mixture posteriors.
    pub fn uses_mixture(self) -> bool {
        matches!(
            self,
            Variant::DyS | Variant::DyH | Variant::MDyrS | Variant::MDyrH | Variant::MdDyrH | Variant::MdDyrSh
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid("variant", format!("unknown variant `{s}`")))
    }
}

/// Step schedule: `initial · factor^k` where `k` counts drop epochs already passed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub drops: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.drops.iter().filter(|&&d| epoch > d).count();
        self.initial * self.factor.powi(k as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub variant: Variant,
    pub total_epochs: usize,
    pub lr: LrSchedule,
    pub warmup_epochs: usize,
    /// First epoch of dynamic input blending (MD variants).
    pub dyn_mixup_start_epoch: usize,
    /// First epoch with a corrected objective.
    pub bootstrap_start_epoch: usize,
    /// Epoch at which the target temperature reaches its final value.
    pub temp_decay_end_epoch: usize,
    pub mixup_alpha: f64,
    pub eta: f64,
    pub refit_period_epochs: f64,
    pub em_iters: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs whose per-sample losses are kept for a loss-trace dump.
    #[serde(default)]
    pub trace_epochs: Vec<usize>,
}

fn scaled(total: usize, num: usize, den: usize) -> usize {
    ((total * num) as f64 / den as f64).round() as usize
}

impl TrainPlan {
    /// Desk-scale schedule for `variant` over `total_epochs`.
    ///
    /// Mixup variants follow a 60-epoch template (warm-up 20, drops at 20 and
    /// 50, temperature reaching its floor at 40); the others a 30-epoch one
    /// (warm-up 8, drops at 8, 20 and 28). Other budgets rescale the template.
    pub fn desk(variant: Variant, total_epochs: usize, seed: u64) -> Self {
        let t = total_epochs.max(1);
        let (warmup, drops) = if variant.uses_mixup() {
            (scaled(t, 20, 60), vec![scaled(t, 20, 60), scaled(t, 50, 60)])
        } else {
            (scaled(t, 8, 30), vec![scaled(t, 8, 30), scaled(t, 20, 30), scaled(t, 28, 30)])
        };
        let warmup = warmup.min(t.saturating_sub(1));
        let (dyn_start, boot_start) =
            if variant.uses_dynamic_mixup() { (warmup + 1, warmup + 2) } else { (warmup + 1, warmup + 1) };
        Self {
            variant,
            total_epochs: t,
            lr: LrSchedule { initial: 0.1, drops, factor: 0.1 },
            warmup_epochs: warmup,
            dyn_mixup_start_epoch: dyn_start,
            bootstrap_start_epoch: boot_start,
            temp_decay_end_epoch: scaled(t, 2, 3).max(boot_start + 1),
            mixup_alpha: MIXUP_ALPHA,
            eta: 1.0,
            refit_period_epochs: 1.0,
            em_iters: mixture::DEFAULT_EM_ITERS,
            batch_size: data::DEFAULT_BATCH_SIZE,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed,
            trace_epochs: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::invalid("total_epochs", "must be positive"));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::invalid(
                "warmup_epochs",
                format!("{} must be below total_epochs {}", self.warmup_epochs, self.total_epochs),
            ));
        }
        if self.bootstrap_start_epoch <= self.warmup_epochs {
            return Err(Error::invalid("bootstrap_start_epoch", "must come after warm-up"));
        }
        if self.variant.uses_dynamic_mixup() {
            if self.dyn_mixup_start_epoch <= self.warmup_epochs {
                return Err(Error::invalid("dyn_mixup_start_epoch", "must come after warm-up"));
            }
            if self.dyn_mixup_start_epoch > self.bootstrap_start_epoch {
                return Err(Error::invalid("dyn_mixup_start_epoch", "must not come after bootstrap_start_epoch"));
            }
        }
        if self.variant.is_tempered() && self.temp_decay_end_epoch <= self.bootstrap_start_epoch {
            return Err(Error::invalid("temp_decay_end_epoch", "must come after bootstrap_start_epoch"));
        }
        if !(self.refit_period_epochs > 0.0) {
            return Err(Error::invalid("refit_period_epochs", "must be positive"));
        }
        if self.variant.uses_mixup() && !(self.mixup_alpha > 0.0) {
            return Err(Error::invalid("mixup_alpha", "must be positive"));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::invalid("eta", "must be nonnegative"));
        }
        if self.batch_size == 0 || (self.variant.uses_mixup() && self.batch_size < 2) {
            return Err(Error::invalid("batch_size", "too small"));
        }
        if !(self.lr.initial >= 0.0) {
            return Err(Error::invalid("lr", "must be nonnegative"));
        }
        if self.em_iters == 0 {
            return Err(Error::invalid("em_iters", "must be positive"));
        }
        Ok(())
    }

    /// Target temperature at `epoch` (1 unless the variant is tempered).
    pub fn temperature(&self, epoch: usize) -> f64 {
        if self.variant.is_tempered() {
            losses::temperature_schedule(
                epoch,
                self.bootstrap_start_epoch,
                self.temp_decay_end_epoch,
                1.0,
                FINAL_TEMPERATURE,
            )
        } else {
            1.0
        }
    }
}

/// How inputs are blended in an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Blend {
    None,
    Mixup,
    DynamicMixup,
}

/// Where bootstrapping weights come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Correction {
    None,
    /// Constant weight for every sample.
    Constant {
        weight: f64,
        mode: BootstrapMode,
    },
    /// Per-sample weight `p(noisy | ℓ_i)`.
    Dynamic {
        mode: BootstrapMode,
    },
}

/// The objective a plan prescribes for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub blend: Blend,
    pub correction: Correction,
    pub regularize: bool,
}

impl Objective {
    pub fn consults_mixture(&self) -> bool {
        self.blend == Blend::DynamicMixup || matches!(self.correction, Correction::Dynamic { .. })
    }

    pub fn is_plain(&self) -> bool {
        self.correction == Correction::None && !self.regularize
    }
}

/// Objective for `epoch` (1-based). Rejects phases that need a mixture when
/// none has been fitted.
pub fn epoch_objective(plan: &TrainPlan, epoch: usize, mixture: Option<&BetaMixture>) -> Result<Objective> {
    if epoch == 0 || epoch > plan.total_epochs {
        return Err(Error::invalid("epoch", format!("{epoch} outside 1..={}", plan.total_epochs)));
    }
    let v = plan.variant;
    let correcting = epoch >= plan.bootstrap_start_epoch;
    let blend = if !v.uses_mixup() {
        Blend::None
    } else if v.uses_dynamic_mixup() && epoch >= plan.dyn_mixup_start_epoch {
        Blend::DynamicMixup
    } else {
        Blend::Mixup
    };
    let soft_or_hard = |hard: bool| if hard { BootstrapMode::Hard } else { BootstrapMode::Soft };
    let correction = if !correcting {
        Correction::None
    } else {
        match v {
            Variant::Ce | Variant::M => Correction::None,
            Variant::StS => Correction::Constant { weight: STATIC_SOFT_WEIGHT, mode: BootstrapMode::Soft },
            Variant::StH => Correction::Constant { weight: STATIC_HARD_WEIGHT, mode: BootstrapMode::Hard },
            Variant::FixedW => Correction::Constant { weight: FIXED_WEIGHT, mode: BootstrapMode::Hard },
            Variant::DyS | Variant::MDyrS => Correction::Dynamic { mode: soft_or_hard(false) },
            Variant::DyH | Variant::MDyrH | Variant::MdDyrH => Correction::Dynamic { mode: soft_or_hard(true) },
            Variant::MdDyrSh => Correction::Dynamic { mode: BootstrapMode::Tempered(plan.temperature(epoch)) },
        }
    };
    let regularize = v.uses_mixup() && correction != Correction::None;
    let obj = Objective { blend, correction, regularize };
    if obj.consults_mixture() && mixture.is_none() {
        return Err(Error::NoMixture(format!("{} needs a fitted mixture at epoch {epoch}", v)));
    }
    Ok(obj)
}

/// Per-epoch record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub mean_train_loss: f64,
    pub validation_accuracy: f64,
    /// Clean/noisy AUC of the beta-mixture posteriors; absent when the mask is
    /// single-class or no mixture exists yet.
    pub clean_noisy_auc: Option<f64>,
    /// Same, for a Gaussian mixture fitted to the same losses.
    pub gmm_auc: Option<f64>,
    pub bmm: Option<BetaMixture>,
    pub temperature: f64,
    pub clean_quartiles: Option<[f64; 3]>,
    pub noisy_quartiles: Option<[f64; 3]>,
    /// Objective of the refit pass(es) in this epoch; always plain CE.
    pub refit_objective: Option<String>,
    pub refits: usize,
    pub consulted_mixture: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub noise_rate: f64,
    pub criterion: Option<String>,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub last_accuracy: f64,
    pub diverged_at: Option<usize>,
    pub final_auc: Option<f64>,
    pub final_gmm_auc: Option<f64>,
    pub auc_trajectory: Vec<Option<f64>>,
}

/// One row of the loss-trace dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub sample_id: usize,
    pub raw_loss: f64,
    pub normalized_loss: f64,
    pub posterior_noisy: f64,
    pub is_actually_noisy: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub epochs: Vec<EpochMetrics>,
    pub summary: RunSummary,
    pub trace: Vec<TraceRow>,
}

/// Fitted noise model plus the normalization constant of its loss pass.
#[derive(Debug, Clone, Copy)]
struct NoiseModel {
    mixture: BetaMixture,
    max_loss: f64,
}

impl NoiseModel {
    fn posterior_noisy(&self, raw: f64) -> f64 {
        self.mixture.posterior_noisy(mixture::normalize_loss(raw, self.max_loss))
    }

    fn posterior_clean(&self, raw: f64) -> f64 {
        self.mixture.posterior_clean(mixture::normalize_loss(raw, self.max_loss))
    }
}

/// Argmax accuracy on `split` against the true labels.
pub fn evaluate(model: &Mlp, dataset: &NoisyDataset, split: Split) -> Result<f64> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(Error::invalid("split", format!("{split:?} split is empty")));
    }
    let truth = dataset.evaluation_view().true_labels;
    let mut predicted = Vec::with_capacity(idx.len());
    let mut expected = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let scores = model.forward(&dataset.gather(chunk))?;
        predicted.extend(scores.rows().map(argmax));
        expected.extend(chunk.iter().map(|&i| truth[i]));
    }
    metrics::accuracy(&predicted, &expected)
}

/// Plain cross-entropy of every training sample against its observed label.
fn loss_pass(model: &Mlp, dataset: &NoisyDataset, train: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(train.len());
    for chunk in train.chunks(EVAL_CHUNK) {
        let scores = model.forward(&dataset.gather(chunk))?;
        let probs = softmax(&scores, 1.0)?;
        let targets = SoftTargets::onehot(&dataset.gather_labels(chunk), dataset.classes())?;
        out.extend(targets.evaluate(&probs)?);
    }
    Ok(out)
}

fn refit(raw: &[f64], em_iters: usize) -> Result<NoiseModel> {
    let obs: Vec<f64> = LossObservation::from_epoch(raw).iter().map(|o| o.normalized_loss).collect();
    let max_loss = raw.iter().copied().fold(0.0, f64::max);
    Ok(NoiseModel { mixture: mixture::fit_bmm(&obs, em_iters)?, max_loss })
}

/// One optimizer step; returns the objective value.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Mlp,
    opt: &mut Sgd,
    lr: f64,
    plan: &TrainPlan,
    obj: &Objective,
    noise: Option<&NoiseModel>,
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    rng: &mut rng::Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let needs_extra =
        obj.blend != Blend::None && (obj.correction != Correction::None || obj.blend == Blend::DynamicMixup);

    // constant predictions of an unrecorded pass over the unmixed batch
    let extra_scores = if needs_extra { Some(model.forward(x)?) } else { None };
    let weights_for = |scores: &Tensor| -> Result<Vec<f64>> {
        Ok(match obj.correction {
            Correction::None => vec![0.0; labels.len()],
            Correction::Constant { weight, .. } => vec![weight; labels.len()],
            Correction::Dynamic { .. } => {
                let nm = noise.ok_or_else(|| Error::NoMixture("dynamic bootstrapping".into()))?;
                let ce = losses::cross_entropy(&softmax(scores, 1.0)?, labels)?;
                ce.iter().map(|&l| nm.posterior_noisy(l)).collect()
            }
        })
    };
    let mode = match obj.correction {
        Correction::Constant { mode, .. } | Correction::Dynamic { mode } => mode,
        Correction::None => BootstrapMode::Hard,
    };

    let (probs, targets) = match obj.blend {
        Blend::None => {
            let scores = model.forward_tape(&mut tape, x)?;
            let probs = tape.softmax(scores, 1.0)?;
            let targets = if obj.correction == Correction::None {
                SoftTargets::onehot(labels, classes)?
            } else {
                let detached = tape.tensor(scores);
                let w = weights_for(&detached)?;
                SoftTargets::bootstrap(&BatchTargets::new(labels.to_vec(), w, detached)?, mode)?
            };
            (probs, targets)
        }
        Blend::Mixup | Blend::DynamicMixup => {
            let clean_post: Vec<f64>;
            let source = if obj.blend == Blend::DynamicMixup {
                let nm = noise.ok_or_else(|| Error::NoMixture("dynamic mixup".into()))?;
                let scores = extra_scores.as_ref().expect("computed for dynamic mixup");
                let ce = losses::cross_entropy(&softmax(scores, 1.0)?, labels)?;
                clean_post = ce.iter().map(|&l| nm.posterior_clean(l)).collect();
                DeltaSource::Dynamic { clean_posteriors: &clean_post, alpha: plan.mixup_alpha }
            } else {
                DeltaSource::Beta { alpha: plan.mixup_alpha }
            };
            let (mixed, pairs) = losses::mixup_blend(x, source, rng)?;
            let scores = model.forward_tape(&mut tape, &mixed)?;
            let probs = tape.softmax(scores, 1.0)?;
            let targets = if obj.correction == Correction::None {
                SoftTargets::mixup(labels, classes, &pairs)?
            } else {
                let extra = extra_scores.expect("computed for corrected objectives");
                let w = weights_for(&extra)?;
                SoftTargets::joint(&BatchTargets::new(labels.to_vec(), w, extra)?, &pairs, mode)?
            };
            (probs, targets)
        }
    };

    let ce = tape.target_ce(probs, targets)?;
    let total = if obj.regularize {
        let r = tape.prior_kl(probs)?;
        tape.weighted_sum(&[(1.0, ce), (plan.eta, r)])?
    } else {
        ce
    };
    let value = tape.scalar(total);
    if !value.is_finite() {
        return Ok(value);
    }
    tape.backward(total, model)?;
    opt.step(model, lr)?;
    Ok(value)
}

/// Trains `model` on `dataset` following `plan`.
pub fn run(plan: &TrainPlan, dataset: &NoisyDataset, model: &mut Mlp) -> Result<RunOutput> {
    plan.validate()?;
    if model.input_dim() != dataset.dim() || model.classes() != dataset.classes() {
        return Err(Error::shape(
            "run",
            format!("model {}→{}", dataset.dim(), dataset.classes()),
            format!("{}→{}", model.input_dim(), model.classes()),
        ));
    }
    let train = dataset.indices(Split::Train);
    if train.len() < 10 {
        return Err(Error::invalid("dataset", "need at least 10 training samples"));
    }
    let view = dataset.evaluation_view();
    let train_mask: Vec<bool> = train.iter().map(|&i| view.corruption_mask[i]).collect();
    let classes = dataset.classes();

    let mut opt = Sgd::new(plan.momentum, plan.weight_decay)?;
    let mut noise: Option<NoiseModel> = None;
    let mut epochs = Vec::with_capacity(plan.total_epochs);
    let mut trace = Vec::new();
    let mut diverged_at = None;
    let mut next_refit = plan.refit_period_epochs;

    for epoch in 1..=plan.total_epochs {
        let lr = plan.lr.lr_at(epoch);
        let obj = epoch_objective(plan, epoch, noise.as_ref().map(|n| &n.mixture))?;
        let batches = data::batches(&train, plan.batch_size, plan.seed, epoch, obj.blend != Blend::None)?;
        let nb = batches.len();
        let mut mix_rng = rng::stream(plan.seed, STREAM_MIXUP, epoch as u64);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let mut refits = 0;
        let mut end_pass: Option<Vec<f64>> = None;

        for (bi, batch) in batches.iter().enumerate() {
            let x = dataset.gather(batch);
            let labels = dataset.gather_labels(batch);
            let value =
                train_step(model, &mut opt, lr, plan, &obj, noise.as_ref(), &x, &labels, classes, &mut mix_rng)?;
            if !value.is_finite() {
                diverged_at = Some(epoch);
                break;
            }
            loss_sum += value * batch.len() as f64;
            seen += batch.len();

            let progress = (epoch - 1) as f64 + (bi + 1) as f64 / nb as f64;
            if progress + 1e-9 >= next_refit {
                while next_refit <= progress + 1e-9 {
                    next_refit += plan.refit_period_epochs;
                }
                let raw = loss_pass(model, dataset, &train)?;
                if raw.iter().all(|l| l.is_finite()) {
                    noise = Some(refit(&raw, plan.em_iters)?);
                    refits += 1;
                }
                if bi + 1 == nb {
                    end_pass = Some(raw);
                }
            }
        }

        let raw = match end_pass {
            Some(r) => r,
            None => loss_pass(model, dataset, &train)?,
        };
        let finite = raw.iter().all(|l| l.is_finite());
        let max = raw.iter().copied().fold(0.0, f64::max);
        let normalized: Vec<f64> = raw.iter().map(|&l| mixture::normalize_loss(l, max)).collect();
        let posteriors: Option<Vec<f64>> =
            noise.filter(|_| finite).map(|n| normalized.iter().map(|&x| n.mixture.posterior_noisy(x)).collect());
        let auc = match (&posteriors, noise) {
            (Some(p), Some(n)) if !n.mixture.degenerate => metrics::clean_noisy_auc(p, &train_mask)?,
            _ => None,
        };
        let gmm_auc = if finite && noise.is_some() {
            let g = mixture::fit_gmm(&normalized, plan.em_iters)?;
            let p: Vec<f64> = normalized.iter().map(|&x| g.posterior_noisy(x)).collect();
            metrics::clean_noisy_auc(&p, &train_mask)?
        } else {
            None
        };
        type Tagged = Vec<(f64, bool)>;
        let (clean_raw, noisy_raw): (Tagged, Tagged) =
            raw.iter().copied().zip(train_mask.iter().copied()).partition(|(_, m)| !m);
        let strip = |v: Tagged| v.into_iter().map(|(l, _)| l).collect::<Vec<f64>>();

        if plan.trace_epochs.contains(&epoch) {
            if let Some(p) = &posteriors {
                for (k, &i) in train.iter().enumerate() {
                    trace.push(TraceRow {
                        epoch,
                        sample_id: i,
                        raw_loss: raw[k],
                        normalized_loss: normalized[k],
                        posterior_noisy: p[k],
                        is_actually_noisy: train_mask[k],
                    });
                }
            }
        }

        epochs.push(EpochMetrics {
            epoch,
            lr,
            mean_train_loss: if diverged_at.is_some() { f64::NAN } else { loss_sum / seen.max(1) as f64 },
            validation_accuracy: evaluate(model, dataset, Split::Validation)?,
            clean_noisy_auc: auc,
            gmm_auc,
            bmm: noise.map(|n| n.mixture),
            temperature: plan.temperature(epoch),
            clean_quartiles: metrics::quartiles(&strip(clean_raw)),
            noisy_quartiles: metrics::quartiles(&strip(noisy_raw)),
            refit_objective: (refits > 0).then(|| "CE".to_string()),
            refits,
            consulted_mixture: obj.consults_mixture(),
        });
        if diverged_at.is_some() {
            break;
        }
    }

    let summary = summarize(plan, dataset, &epochs, diverged_at);
    Ok(RunOutput { epochs, summary, trace })
}

fn summarize(
    plan: &TrainPlan,
    dataset: &NoisyDataset,
    epochs: &[EpochMetrics],
    diverged_at: Option<usize>,
) -> RunSummary {
    let mut best = (f64::NEG_INFINITY, 0);
    for m in epochs {
        if m.validation_accuracy > best.0 {
            best = (m.validation_accuracy, m.epoch);
        }
    }
    let last = epochs.last();
    RunSummary {
        variant: plan.variant,
        noise_rate: dataset.noise().map_or(0.0, |n| n.rate),
        criterion: dataset.noise().map(|n| n.criterion.to_string()),
        seed: plan.seed,
        epochs_run: epochs.len(),
        best_accuracy: best.0.max(0.0),
        best_epoch: best.1,
        last_accuracy: last.map_or(0.0, |m| m.validation_accuracy),
        diverged_at,
        final_auc: last.and_then(|m| m.clean_noisy_auc),
        final_gmm_auc: last.and_then(|m| m.gmm_auc),
        auc_trajectory: epochs.iter().map(|m| m.clean_noisy_auc).collect(),
    }
}

pub const METRICS_HEADER: &str = "epoch,variant,noise_rate,criterion,mean_train_loss,val_acc,auc,lambda0,alpha0,beta0,alpha1,beta1,T,clean_q25,clean_q50,clean_q75,noisy_q25,noisy_q50,noisy_q75";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the per-epoch metrics CSV. Mixture columns list the clean component
/// first (`*0`) and the noisy one second (`*1`).
pub fn write_metrics_csv<W: Write>(
    mut w: W,
    plan: &TrainPlan,
    dataset: &NoisyDataset,
    epochs: &[EpochMetrics],
) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    let rate = dataset.noise().map_or(0.0, |n| n.rate);
    let criterion = dataset.noise().map(|n| n.criterion.to_string()).unwrap_or_default();
    for m in epochs {
        let (c, n) = match m.bmm {
            Some(b) => (Some(b.clean_component), Some(b.noisy_component())),
            None => (None, None),
        };
        let param = |f: &dyn Fn(&BetaMixture, usize) -> f64, k: Option<usize>| {
            opt_cell(m.bmm.as_ref().zip(k).map(|(b, k)| f(b, k)))
        };
        let q = |qs: Option<[f64; 3]>, i: usize| opt_cell(qs.map(|q| q[i]));
        let cells = [
            m.epoch.to_string(),
            plan.variant.to_string(),
            rate.to_string(),
            criterion.clone(),
            m.mean_train_loss.to_string(),
            m.validation_accuracy.to_string(),
            opt_cell(m.clean_noisy_auc),
            param(&|b, k| b.lambda[k], c),
            param(&|b, k| b.alpha[k], c),
            param(&|b, k| b.beta[k], c),
            param(&|b, k| b.alpha[k], n),
            param(&|b, k| b.beta[k], n),
            m.temperature.to_string(),
            q(m.clean_quartiles, 0),
            q(m.clean_quartiles, 1),
            q(m.clean_quartiles, 2),
            q(m.noisy_quartiles, 0),
            q(m.noisy_quartiles, 1),
            q(m.noisy_quartiles, 2),
        ];
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

pub const TRACE_HEADER: &str = "epoch,sample_id,raw_loss,normalized_loss,posterior_noisy,is_actually_noisy";

pub fn write_loss_trace<W: Write>(mut w: W, rows: &[TraceRow]) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch,
            r.sample_id,
            r.raw_loss,
            r.normalized_loss,
            r.posterior_noisy,
            u8::from(r.is_actually_noisy)
        )?;
    }
    Ok(())
}

/// Parses a loss-trace CSV; malformed rows are reported with their line number.
pub fn read_loss_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let perr = |line: usize, column: usize, reason: String| Error::Parse { path: name.clone(), line, column, reason };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRACE_HEADER => {}
        Some((_, h)) => return Err(perr(1, 1, format!("unexpected header `{h}`"))),
        None => return Err(perr(1, 1, "empty trace".into())),
    }
    let mut rows = Vec::new();
    for (k, line) in lines {
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 6 {
            return Err(perr(lineno, cells.len(), format!("expected 6 cells, found {}", cells.len())));
        }
        let num = |i: usize| -> Result<f64> {
            cells[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(lineno, i + 1, format!("bad number `{}`", cells[i])))
        };
        let int = |i: usize| -> Result<usize> {
            cells[i].parse().map_err(|_| perr(lineno, i + 1, format!("bad integer `{}`", cells[i])))
        };
        let is_noisy = match cells[5] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(perr(lineno, 6, format!("bad flag `{other}`"))),
        };
        let normalized_loss = num(3)?;
        if !(normalized_loss > 0.0 && normalized_loss < 1.0) {
            return Err(perr(lineno, 4, format!("normalized loss {normalized_loss} outside (0, 1)")));
        }
        rows.push(TraceRow {
            epoch: int(0)?,
            sample_id: int(1)?,
            raw_loss: num(2)?,
            normalized_loss,
            posterior_noisy: num(4)?,
            is_actually_noisy: is_noisy,
        });
    }
    Ok(rows)
}
