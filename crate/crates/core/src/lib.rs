//! Label-noise laboratory.
//!
//! Per-sample training losses are modeled with a two-component beta mixture
//! fitted by EM. The clean/noisy posteriors of that mixture drive a family of
//! corrected objectives (dynamic bootstrapping, mixup fusion, dynamic mixup and
//! soft-to-hard temperature decay) used to train a small MLP classifier on
//! datasets with injected label noise.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mixture;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use data::{Criterion, NoiseSpec, NoisyDataset, Split, SyntheticKind};
pub use error::{Error, Result};
pub use losses::{BatchTargets, BootstrapMode, MixPair, SoftTargets};
pub use mixture::{BetaMixture, GaussMixture, LossObservation};
pub use nn::{Mlp, Sgd, Tape, Tensor};
pub use trainer::{EpochMetrics, RunSummary, TrainPlan, Variant};
