use serde::{Deserialize, Serialize};

use super::{check_observations, VARIANCE_FLOOR};
use crate::error::Result;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

fn normal_ln_pdf(x: f64, mu: f64, sigma2: f64) -> f64 {
    -LN_SQRT_2PI - 0.5 * sigma2.ln() - (x - mu) * (x - mu) / (2.0 * sigma2)
}

/// Two-component Gaussian mixture over normalized losses; baseline for the
/// beta mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussMixture {
    pub lambda: [f64; 2],
    pub mu: [f64; 2],
    pub sigma2: [f64; 2],
}

impl GaussMixture {
    /// Component with the larger mean (index 1 on ties).
    pub fn noisy_component(&self) -> usize {
        if self.mu[0] > self.mu[1] {
            0
        } else {
            1
        }
    }

    pub fn clean_component(&self) -> usize {
        1 - self.noisy_component()
    }

    pub fn responsibilities(&self, x: f64) -> [f64; 2] {
        let ln = [0, 1].map(|k| {
            if self.lambda[k] > 0.0 {
                self.lambda[k].ln() + normal_ln_pdf(x, self.mu[k], self.sigma2[k])
            } else {
                f64::NEG_INFINITY
            }
        });
        let m = ln[0].max(ln[1]);
        if !m.is_finite() {
            return [0.5, 0.5];
        }
        let (a, b) = ((ln[0] - m).exp(), (ln[1] - m).exp());
        [a / (a + b), b / (a + b)]
    }

    pub fn pdf(&self, x: f64) -> f64 {
        (0..2).map(|k| self.lambda[k] * normal_ln_pdf(x, self.mu[k], self.sigma2[k]).exp()).sum()
    }

    pub fn posterior_noisy(&self, x: f64) -> f64 {
        self.responsibilities(x)[self.noisy_component()]
    }
}

pub fn gmm_posterior_noisy(model: &GaussMixture, x: f64) -> f64 {
    model.posterior_noisy(x)
}

/// EM with the exact weighted-MLE M-step, median-split initialization.
pub fn fit_gmm(obs: &[f64], max_iters: usize) -> Result<GaussMixture> {
    check_observations(obs, 2)?;
    let n = obs.len() as f64;
    let mut sorted = obs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = sorted.split_at(sorted.len() / 2);
    let moments = |part: &[f64]| {
        let m = part.iter().sum::<f64>() / part.len() as f64;
        let v = part.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / part.len() as f64;
        (m, v.max(VARIANCE_FLOOR))
    };
    let ((m0, v0), (m1, v1)) = (moments(lo), moments(hi));
    let mut model = GaussMixture { lambda: [0.5, 0.5], mu: [m0, m1], sigma2: [v0, v1] };
    for _ in 0..max_iters {
        let gamma: Vec<[f64; 2]> = obs.iter().map(|&x| model.responsibilities(x)).collect();
        let mut next = model;
        for k in 0..2 {
            let w: f64 = gamma.iter().map(|g| g[k]).sum();
            if w < 1e-12 {
                next.lambda = [0.5, 0.5];
                continue;
            }
            let mu = gamma.iter().zip(obs).map(|(g, x)| g[k] * x).sum::<f64>() / w;
            let var = gamma.iter().zip(obs).map(|(g, x)| g[k] * (x - mu) * (x - mu)).sum::<f64>() / w;
            next.mu[k] = mu;
            next.sigma2[k] = var.max(VARIANCE_FLOOR);
            next.lambda[k] = w / n;
        }
        let s = next.lambda[0] + next.lambda[1];
        next.lambda = [next.lambda[0] / s, next.lambda[1] / s];
        let change = (0..2)
            .flat_map(|k| {
                [
                    (next.lambda[k] - model.lambda[k]).abs(),
                    (next.mu[k] - model.mu[k]).abs(),
                    (next.sigma2[k] - model.sigma2[k]).abs(),
                ]
            })
            .fold(0.0, f64::max);
        model = next;
        if change < super::beta::CONVERGENCE_TOL {
            break;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn repeated_value_gets_floored_variance() {
        let m = fit_gmm(&[0.4; 20], 10).unwrap();
        assert!(m.mu.iter().all(|&mu| (mu - 0.4).abs() < 1e-12));
        assert_eq!(m.sigma2, [VARIANCE_FLOOR, VARIANCE_FLOOR]);
    }

    #[test]
    fn recovers_separated_gaussians() {
        let mut r = rng::seeded(8);
        let (a, b) = (Normal::new(0.2, 0.05).unwrap(), Normal::new(0.8, 0.05).unwrap());
        let obs: Vec<f64> = (0..10_000).map(|i| if i % 2 == 0 { a.sample(&mut r) } else { b.sample(&mut r) }).collect();
        let m = fit_gmm(&obs, 10).unwrap();
        assert!((m.mu[m.clean_component()] - 0.2).abs() < 0.02);
        assert!((m.mu[m.noisy_component()] - 0.8).abs() < 0.02);
        assert!(gmm_posterior_noisy(&m, 0.8) > 0.99);
        assert!(gmm_posterior_noisy(&m, 0.2) < 0.01);
    }
}
