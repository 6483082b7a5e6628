//! Training objectives: cross-entropy, static/dynamic bootstrapping, mixup,
//! the bootstrapped mixup objective with its class-prior regularizer, and the
//! temperature schedule that morphs soft targets into hard ones.
//!
//! Every objective is expressed as a [`SoftTargets`] value: per-sample sums of
//! `weight · (−targetᵀ log h)`. The same value is evaluated directly for
//! reporting and attached to a [`Tape`](crate::nn::Tape) for training, so the
//! two paths agree bit for bit.

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::nn::{argmax, Tensor};
use crate::rng::Rng;

/// Probabilities are clamped to this floor before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;
/// Constant weight of static hard bootstrapping.
pub const STATIC_HARD_WEIGHT: f64 = 0.2;
/// Constant weight of static soft bootstrapping.
pub const STATIC_SOFT_WEIGHT: f64 = 0.05;
/// Default `α` of the symmetric `Beta(α, α)` mixup sampler.
pub const MIXUP_ALPHA: f64 = 32.0;

pub(crate) fn batch_mean(per_sample: &[f64]) -> f64 {
    if per_sample.is_empty() {
        return 0.0;
    }
    per_sample.iter().sum::<f64>() / per_sample.len() as f64
}

/// `ln max(p, floor)`, keeping NaN so that a blown-up forward pass is visible.
fn ln_clamped(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        p.max(LOG_FLOOR).ln()
    }
}

/// `−targetᵀ log(h)`; zero target entries are skipped.
fn ce_row(target: &[f64], probs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&t, &p) in target.iter().zip(probs) {
        if t != 0.0 {
            acc -= t * ln_clamped(p);
        }
    }
    acc
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l >= classes) {
        Some(i) => {
            Err(Error::invalid("labels", format!("label {} at row {i} out of range for {classes} classes", labels[i])))
        }
        None => Ok(()),
    }
}

fn check_probs(probs: &Tensor, rows: usize) -> Result<(usize, usize)> {
    let (r, c) = probs.dims2()?;
    if r != rows {
        return Err(Error::shape("loss", format!("{rows} probability rows"), r));
    }
    Ok((r, c))
}

/// Per-sample `−log h[label]`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let (_, c) = check_probs(probs, labels.len())?;
    check_labels(labels, c)?;
    Ok(probs.rows().zip(labels).map(|(row, &l)| -ln_clamped(row[l])).collect())
}

/// How the model's own prediction enters a bootstrapped target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BootstrapMode {
    /// Softmax probabilities `h` at temperature 1.
    Soft,
    /// One-hot argmax `z`.
    Hard,
    /// Softmax probabilities at the given temperature.
    Tempered(f64),
}

/// Labels, bootstrapping weights and the constant predictions of an extra
/// (unrecorded) forward pass over the unmixed batch.
#[derive(Debug, Clone)]
pub struct BatchTargets {
    classes: usize,
    labels: Vec<usize>,
    boot_weights: Vec<f64>,
    predictions: Option<Predictions>,
}

#[derive(Debug, Clone)]
struct Predictions {
    scores: Tensor,
    soft: Tensor,
    hard: Vec<usize>,
}

impl BatchTargets {
    /// Targets carrying the extra-pass predictions derived from `scores`.
    pub fn new(labels: Vec<usize>, boot_weights: Vec<f64>, scores: Tensor) -> Result<Self> {
        let (r, c) = scores.dims2()?;
        if r != labels.len() || boot_weights.len() != labels.len() {
            return Err(Error::shape(
                "BatchTargets::new",
                format!("{} labels, weights and score rows", labels.len()),
                format!("{} weights, {r} score rows", boot_weights.len()),
            ));
        }
        check_labels(&labels, c)?;
        if let Some(i) = boot_weights.iter().position(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid(
                "boot_weights",
                format!("weight {} at row {i} outside [0, 1]", boot_weights[i]),
            ));
        }
        let soft = crate::nn::softmax(&scores, 1.0)?;
        let hard = scores.rows().map(argmax).collect();
        Ok(Self { classes: c, labels, boot_weights, predictions: Some(Predictions { scores, soft, hard }) })
    }

    /// Targets without predictions; all bootstrapping weights are zero.
    pub fn from_labels(labels: Vec<usize>, classes: usize) -> Result<Self> {
        check_labels(&labels, classes)?;
        let n = labels.len();
        Ok(Self { classes, labels, boot_weights: vec![0.0; n], predictions: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn boot_weights(&self) -> &[f64] {
        &self.boot_weights
    }

    pub fn predictions_soft(&self) -> Option<&Tensor> {
        self.predictions.as_ref().map(|p| &p.soft)
    }

    pub fn predictions_hard(&self) -> Option<&[usize]> {
        self.predictions.as_ref().map(|p| p.hard.as_slice())
    }

    /// Writes `(1 − w)·y + w·prediction` for every row into a `len × C` buffer.
    fn bootstrapped_rows(&self, mode: BootstrapMode) -> Result<Vec<f64>> {
        let c = self.classes;
        let mut out = vec![0.0; self.len() * c];
        let pred = self.predictions.as_ref();
        let needs_pred = self.boot_weights.iter().any(|&w| w != 0.0);
        if needs_pred && pred.is_none() {
            return Err(Error::invalid(
                "predictions",
                "bootstrapping weights are set but no extra forward pass predictions were supplied",
            ));
        }
        let tempered = match (mode, pred) {
            (BootstrapMode::Tempered(t), Some(p)) => Some(crate::nn::softmax(&p.scores, t)?),
            (BootstrapMode::Tempered(t), None) if !(t > 0.0) => {
                return Err(Error::invalid("temperature", format!("must be positive, got {t}")))
            }
            _ => None,
        };
        for (i, row) in out.chunks_exact_mut(c).enumerate() {
            let w = self.boot_weights[i];
            let y = self.labels[i];
            match pred {
                None => row[y] = 1.0,
                Some(p) => {
                    let keep = 1.0 - w;
                    match mode {
                        BootstrapMode::Hard => {
                            row[y] = keep;
                            row[p.hard[i]] += w;
                        }
                        BootstrapMode::Soft | BootstrapMode::Tempered(_) => {
                            let h = match &tempered {
                                Some(t) => t.row(i),
                                None => p.soft.row(i),
                            };
                            for (k, (slot, &hk)) in row.iter_mut().zip(h).enumerate() {
                                let yk = if k == y { keep } else { 0.0 };
                                *slot = yk + w * hk;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One additive piece of a soft-target objective: row weights and a
/// `rows × C` target matrix.
#[derive(Debug, Clone)]
struct TargetTerm {
    weight: Vec<f64>,
    target: Vec<f64>,
}

/// A soft-target cross-entropy objective, `ℓ_i = Σ_t weight_t[i] · (−target_t[i]ᵀ log h_i)`.
///
/// The targets are constants: no gradient flows into them.
#[derive(Debug, Clone)]
pub struct SoftTargets {
    rows: usize,
    classes: usize,
    terms: Vec<TargetTerm>,
}

impl SoftTargets {
    fn single(rows: usize, classes: usize, target: Vec<f64>) -> Self {
        Self { rows, classes, terms: vec![TargetTerm { weight: vec![1.0; rows], target }] }
    }

    /// Plain cross-entropy against one-hot labels.
    pub fn onehot(labels: &[usize], classes: usize) -> Result<Self> {
        check_labels(labels, classes)?;
        let mut t = vec![0.0; labels.len() * classes];
        for (i, &l) in labels.iter().enumerate() {
            t[i * classes + l] = 1.0;
        }
        Ok(Self::single(labels.len(), classes, t))
    }

    /// Bootstrapping: target `(1 − w_i)·y_i + w_i·(z_i or h_i)`.
    pub fn bootstrap(targets: &BatchTargets, mode: BootstrapMode) -> Result<Self> {
        let t = targets.bootstrapped_rows(mode)?;
        Ok(Self::single(targets.len(), targets.classes, t))
    }

    /// Mixup cross-entropy: `δ·CE(h, y_p) + (1 − δ)·CE(h, y_q)` per pair.
    pub fn mixup(labels: &[usize], classes: usize, pairs: &[MixPair]) -> Result<Self> {
        let plain = BatchTargets::from_labels(labels.to_vec(), classes)?;
        Self::joint(&plain, pairs, BootstrapMode::Hard)
    }

    /// Bootstrapped mixup: each half of the pair mixes its label with its own
    /// extra-pass prediction, weighted by that sample's bootstrapping weight.
    pub fn joint(targets: &BatchTargets, pairs: &[MixPair], mode: BootstrapMode) -> Result<Self> {
        let c = targets.classes;
        let rows = targets.bootstrapped_rows(mode)?;
        let n = pairs.len();
        let mut tp = Vec::with_capacity(n * c);
        let mut tq = Vec::with_capacity(n * c);
        let mut wp = Vec::with_capacity(n);
        let mut wq = Vec::with_capacity(n);
        for pair in pairs {
            if pair.index_p >= targets.len() || pair.index_q >= targets.len() {
                return Err(Error::invalid(
                    "pairs",
                    format!("pair ({}, {}) outside batch of {}", pair.index_p, pair.index_q, targets.len()),
                ));
            }
            if !(0.0..=1.0).contains(&pair.delta) {
                return Err(Error::invalid("delta", format!("{} outside [0, 1]", pair.delta)));
            }
            tp.extend_from_slice(&rows[pair.index_p * c..(pair.index_p + 1) * c]);
            tq.extend_from_slice(&rows[pair.index_q * c..(pair.index_q + 1) * c]);
            wp.push(pair.delta);
            wq.push(1.0 - pair.delta);
        }
        Ok(Self {
            rows: n,
            classes: c,
            terms: vec![TargetTerm { weight: wp, target: tp }, TargetTerm { weight: wq, target: tq }],
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    fn check(&self, probs: &[f64], rows: usize, cols: usize) -> Result<()> {
        if rows != self.rows || cols != self.classes || probs.len() != rows * cols {
            return Err(Error::shape(
                "SoftTargets",
                format!("{}×{} probabilities", self.rows, self.classes),
                format!("{rows}×{cols}"),
            ));
        }
        Ok(())
    }

    /// Per-sample loss values against row-major probabilities.
    pub fn per_sample(&self, probs: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
        self.check(probs, rows, cols)?;
        Ok(probs
            .chunks_exact(cols)
            .enumerate()
            .map(|(i, h)| {
                let mut acc = 0.0;
                for term in &self.terms {
                    acc += term.weight[i] * ce_row(&term.target[i * cols..(i + 1) * cols], h);
                }
                acc
            })
            .collect())
    }

    /// Per-sample loss values against a probability tensor.
    pub fn evaluate(&self, probs: &Tensor) -> Result<Vec<f64>> {
        let (r, c) = probs.dims2()?;
        self.per_sample(probs.data(), r, c)
    }

    /// Gradient of `upstream · mean_i ℓ_i` with respect to the probabilities.
    pub(crate) fn grad_wrt_probs(&self, probs: &[f64], rows: usize, cols: usize, upstream: f64) -> Vec<f64> {
        let scale = upstream / rows.max(1) as f64;
        let mut g = vec![0.0; rows * cols];
        for term in &self.terms {
            for (i, (gr, h)) in g.chunks_exact_mut(cols).zip(probs.chunks_exact(cols)).enumerate() {
                let w = term.weight[i];
                if w == 0.0 {
                    continue;
                }
                let t = &term.target[i * cols..(i + 1) * cols];
                for ((gv, &tv), &p) in gr.iter_mut().zip(t).zip(h) {
                    if tv != 0.0 && p > LOG_FLOOR {
                        *gv -= scale * w * tv / p;
                    }
                }
            }
        }
        g
    }
}

/// Per-sample bootstrapping loss `−((1 − w_i)·y_i + w_i·(z_i | h_i))ᵀ log h_i`.
pub fn bootstrap_loss(probs: &Tensor, targets: &BatchTargets, mode: BootstrapMode) -> Result<Vec<f64>> {
    check_probs(probs, targets.len())?;
    SoftTargets::bootstrap(targets, mode)?.evaluate(probs)
}

/// A mixup pairing of batch rows `p` and `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixPair {
    pub index_p: usize,
    pub index_q: usize,
    /// Loss coefficient: the pair's loss is `δ·ℓ_p + (1 − δ)·ℓ_q`.
    pub delta: f64,
    /// Input coefficient: the mixed input is `c·x_p + (1 − c)·x_q`. Equal to
    /// `delta` for standard mixup.
    pub input_weight: f64,
}

/// Where mixing coefficients come from.
#[derive(Debug, Clone, Copy)]
pub enum DeltaSource<'a> {
    /// `δ ~ Beta(α, α)` per pair, used for both input and loss.
    Beta { alpha: f64 },
    /// Input coefficient `δ_p / (δ_p + δ_q)` from clean posteriors `δ_i = p(clean | ℓ_i)`;
    /// the loss coefficient is still drawn from `Beta(α, α)`.
    Dynamic { clean_posteriors: &'a [f64], alpha: f64 },
}

/// `δ_p / (δ_p + δ_q)`, or 0.5 when both posteriors vanish.
pub fn dynamic_mix_coefficient(clean_p: f64, clean_q: f64) -> f64 {
    let s = clean_p + clean_q;
    if s > 0.0 {
        clean_p / s
    } else {
        0.5
    }
}

/// Pairs every row with a row of a seeded permutation of the batch and blends
/// the inputs.
pub fn mixup_blend(batch: &Tensor, source: DeltaSource<'_>, rng: &mut Rng) -> Result<(Tensor, Vec<MixPair>)> {
    let (rows, _) = batch.dims2()?;
    if rows < 2 {
        return Err(Error::invalid("batch", format!("mixup needs at least 2 rows, got {rows}")));
    }
    let alpha = match source {
        DeltaSource::Beta { alpha } | DeltaSource::Dynamic { alpha, .. } => alpha,
    };
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid("alpha", e.to_string()))?;
    if let DeltaSource::Dynamic { clean_posteriors, .. } = source {
        if clean_posteriors.len() != rows {
            return Err(Error::shape("mixup_blend", format!("{rows} clean posteriors"), clean_posteriors.len()));
        }
    }
    let mut perm: Vec<usize> = (0..rows).collect();
    perm.shuffle(rng);
    let pairs: Vec<MixPair> = perm
        .iter()
        .enumerate()
        .map(|(p, &q)| {
            let delta: f64 = beta.sample(rng);
            let input_weight = match source {
                DeltaSource::Beta { .. } => delta,
                DeltaSource::Dynamic { clean_posteriors, .. } => {
                    dynamic_mix_coefficient(clean_posteriors[p], clean_posteriors[q])
                }
            };
            MixPair { index_p: p, index_q: q, delta, input_weight }
        })
        .collect();
    let mixed = blend_inputs(batch, &pairs)?;
    Ok((mixed, pairs))
}

/// `c·x_p + (1 − c)·x_q` for every pair.
pub fn blend_inputs(batch: &Tensor, pairs: &[MixPair]) -> Result<Tensor> {
    let (rows, d) = batch.dims2()?;
    let mut out = Vec::with_capacity(pairs.len() * d);
    for pair in pairs {
        if pair.index_p >= rows || pair.index_q >= rows {
            return Err(Error::invalid(
                "pairs",
                format!("pair ({}, {}) outside batch of {rows}", pair.index_p, pair.index_q),
            ));
        }
        let c = pair.input_weight;
        let xp = batch.row(pair.index_p);
        let xq = batch.row(pair.index_q);
        out.extend(xp.iter().zip(xq).map(|(a, b)| c * a + (1.0 - c) * b));
    }
    Tensor::matrix(pairs.len(), d, out)
}

/// Batch mean of `δ_i·ℓ_p[i] + (1 − δ_i)·ℓ_q[i]`.
pub fn mixup_loss(losses_p: &[f64], losses_q: &[f64], deltas: &[f64]) -> Result<f64> {
    if losses_p.len() != losses_q.len() || losses_p.len() != deltas.len() {
        return Err(Error::shape(
            "mixup_loss",
            format!("{} losses and deltas", losses_p.len()),
            format!("{} q-losses, {} deltas", losses_q.len(), deltas.len()),
        ));
    }
    let per: Vec<f64> = losses_p
        .iter()
        .zip(losses_q)
        .zip(deltas)
        .map(|((&lp, &lq), &d)| {
            let mut acc = 0.0;
            acc += d * lp;
            acc += (1.0 - d) * lq;
            acc
        })
        .collect();
    Ok(batch_mean(&per))
}

/// Batch mean of the bootstrapped mixup loss against mixed-input probabilities `h`.
pub fn joint_corrected_loss(
    mixed_probs: &Tensor,
    targets: &BatchTargets,
    pairs: &[MixPair],
    mode: BootstrapMode,
) -> Result<f64> {
    let per = SoftTargets::joint(targets, pairs, mode)?.evaluate(mixed_probs)?;
    Ok(batch_mean(&per))
}

/// `R = Σ_c p_c log(p_c / h̄_c)` with a uniform prior `p_c = 1/C`.
pub fn class_prior_regularizer(mean_softmax: &[f64]) -> Result<f64> {
    let c = mean_softmax.len();
    if c == 0 {
        return Err(Error::invalid("mean_softmax", "empty"));
    }
    let total: f64 = mean_softmax.iter().sum();
    if (total - 1.0).abs() > 1e-6 || mean_softmax.iter().any(|&m| !(m >= 0.0)) {
        return Err(Error::invalid("mean_softmax", format!("must be a probability vector, sums to {total}")));
    }
    let prior = 1.0 / c as f64;
    Ok(mean_softmax.iter().map(|&m| prior * (prior.ln() - ln_clamped(m))).sum::<f64>().max(0.0))
}

/// Linear decay from `t_start` (at and before `start_epoch`) to `t_end` (at
/// and after `end_epoch`).
pub fn temperature_schedule(epoch: usize, start_epoch: usize, end_epoch: usize, t_start: f64, t_end: f64) -> f64 {
    if epoch <= start_epoch {
        t_start
    } else if epoch >= end_epoch {
        t_end
    } else {
        let frac = (epoch - start_epoch) as f64 / (end_epoch - start_epoch) as f64;
        t_start + (t_end - t_start) * frac
    }
}
