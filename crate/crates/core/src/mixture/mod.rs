//! Unsupervised two-component models of the per-sample loss distribution.

mod beta;
mod gauss;

pub use beta::{
    beta_ln_pdf, beta_pdf, e_step, fit_bmm, initial_mixture, m_step, moments_to_shape, posterior_noisy, BetaMixture,
    CONVERGENCE_TOL, DEFAULT_EM_ITERS,
};
pub use gauss::{fit_gmm, gmm_posterior_noisy, GaussMixture};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observations are bounded to `[ε, 1 − ε]` before fitting.
pub const LOSS_EPSILON: f64 = 1e-4;
/// Lower bound applied to every component variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// One sample's loss from a full cross-entropy pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossObservation {
    pub sample_id: usize,
    pub raw_loss: f64,
    pub normalized_loss: f64,
}

/// `clamp(raw / max, ε, 1 − ε)`; a nonpositive `max` maps everything to ε.
pub fn normalize_loss(raw: f64, max: f64) -> f64 {
    let v = if max > 0.0 { raw / max } else { 0.0 };
    v.clamp(LOSS_EPSILON, 1.0 - LOSS_EPSILON)
}

impl LossObservation {
    /// Max-normalizes one epoch's raw losses, then bounds them.
    pub fn from_epoch(raw: &[f64]) -> Vec<LossObservation> {
        let max = raw.iter().copied().fold(0.0, f64::max);
        raw.iter()
            .enumerate()
            .map(|(sample_id, &raw_loss)| LossObservation {
                sample_id,
                raw_loss,
                normalized_loss: normalize_loss(raw_loss, max),
            })
            .collect()
    }
}

fn check_observations(obs: &[f64], min: usize) -> Result<()> {
    if obs.len() < min {
        return Err(Error::invalid("obs", format!("need at least {min} observations, got {}", obs.len())));
    }
    if let Some(i) = obs.iter().position(|x| !(*x > 0.0 && *x < 1.0)) {
        return Err(Error::invalid("obs", format!("observation {i} = {} outside (0, 1)", obs[i])));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_bounds() {
        let obs = LossObservation::from_epoch(&[0.0, 1.0, 2.0, 4.0]);
        let n: Vec<f64> = obs.iter().map(|o| o.normalized_loss).collect();
        assert_eq!(n, vec![LOSS_EPSILON, 0.25, 0.5, 1.0 - LOSS_EPSILON]);
        assert!(n.iter().all(|&x| x > 0.0 && x < 1.0));
        assert_eq!(normalize_loss(3.0, 0.0), LOSS_EPSILON);
    }
}
