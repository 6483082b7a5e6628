use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::{check_observations, VARIANCE_FLOOR};
use crate::error::{Error, Result};

/// Below this total responsibility a component is considered collapsed.
const COLLAPSE_WEIGHT: f64 = 1e-12;
/// EM stops once no parameter moves more than this between iterations.
pub const CONVERGENCE_TOL: f64 = 1e-6;
/// Default EM iteration cap.
pub const DEFAULT_EM_ITERS: usize = 10;

/// `ln p(x | α, β)` for `0 < x < 1`.
pub fn beta_ln_pdf(x: f64, alpha: f64, beta: f64) -> f64 {
    ln_gamma(alpha + beta) - ln_gamma(alpha) - ln_gamma(beta) + (alpha - 1.0) * x.ln() + (beta - 1.0) * (-x).ln_1p()
}

/// Beta density, evaluated in log space and exponentiated.
pub fn beta_pdf(x: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::invalid("x", format!("{x} outside (0, 1); bound observations first")));
    }
    if !(alpha > 0.0 && beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::invalid("shape", format!("alpha={alpha}, beta={beta} must be positive and finite")));
    }
    Ok(beta_ln_pdf(x, alpha, beta).exp())
}

/// Two-component beta mixture over normalized losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaMixture {
    pub lambda: [f64; 2],
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
    /// Index of the component with the smaller mean.
    pub clean_component: usize,
    /// Set when the observations carried no spread and the symmetric
    /// uniform-components fit was returned.
    #[serde(default)]
    pub degenerate: bool,
}

impl BetaMixture {
    pub fn new(lambda: [f64; 2], alpha: [f64; 2], beta: [f64; 2]) -> Result<Self> {
        if alpha.iter().chain(&beta).any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("shape", format!("alpha={alpha:?}, beta={beta:?} must be positive")));
        }
        if lambda.iter().any(|l| !(0.0..=1.0).contains(l)) || (lambda[0] + lambda[1] - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("lambda", format!("{lambda:?} is not a probability vector")));
        }
        let mut m = Self { lambda, alpha, beta, clean_component: 0, degenerate: false };
        m.assign_clean();
        Ok(m)
    }

    /// Two uniform components with equal weight.
    pub fn symmetric_uniform() -> Self {
        Self { lambda: [0.5, 0.5], alpha: [1.0, 1.0], beta: [1.0, 1.0], clean_component: 0, degenerate: true }
    }

    pub fn mean(&self, k: usize) -> f64 {
        self.alpha[k] / (self.alpha[k] + self.beta[k])
    }

    pub fn noisy_component(&self) -> usize {
        1 - self.clean_component
    }

    fn assign_clean(&mut self) {
        self.clean_component = if self.mean(1) < self.mean(0) { 1 } else { 0 };
    }

    fn weighted_ln(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|k| {
            if self.lambda[k] > 0.0 {
                self.lambda[k].ln() + beta_ln_pdf(x, self.alpha[k], self.beta[k])
            } else {
                f64::NEG_INFINITY
            }
        })
    }

    /// Responsibilities `γ_k(x) ∝ λ_k p(x | α_k, β_k)`; (0.5, 0.5) when both terms vanish.
    pub fn responsibilities(&self, x: f64) -> [f64; 2] {
        let [a, b] = self.weighted_ln(x);
        let m = a.max(b);
        if !m.is_finite() {
            return [0.5, 0.5];
        }
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let s = ea + eb;
        [ea / s, eb / s]
    }

    /// Mixture density at `x`.
    pub fn pdf(&self, x: f64) -> f64 {
        let [a, b] = self.weighted_ln(x);
        a.exp() + b.exp()
    }

    /// Density of one component at `x`.
    pub fn component_pdf(&self, k: usize, x: f64) -> f64 {
        beta_ln_pdf(x, self.alpha[k], self.beta[k]).exp()
    }

    /// `p(noisy | ℓ)`.
    pub fn posterior_noisy(&self, loss: f64) -> f64 {
        self.responsibilities(loss)[self.noisy_component()]
    }

    /// `p(clean | ℓ)`.
    pub fn posterior_clean(&self, loss: f64) -> f64 {
        self.responsibilities(loss)[self.clean_component]
    }

    fn max_abs_change(&self, other: &Self) -> f64 {
        (0..2)
            .flat_map(|k| {
                [
                    (self.lambda[k] - other.lambda[k]).abs(),
                    (self.alpha[k] - other.alpha[k]).abs(),
                    (self.beta[k] - other.beta[k]).abs(),
                ]
            })
            .fold(0.0, f64::max)
    }
}

/// `p(noisy | ℓ)` under `model`.
pub fn posterior_noisy(model: &BetaMixture, loss: f64) -> f64 {
    model.posterior_noisy(loss)
}

/// E-step: responsibilities for every observation.
pub fn e_step(obs: &[f64], model: &BetaMixture) -> Vec<[f64; 2]> {
    obs.iter().map(|&x| model.responsibilities(x)).collect()
}

/// Method-of-moments shape parameters from a mean and variance, with the
/// variance floored and capped so both shapes stay positive.
pub fn moments_to_shape(mean: f64, var: f64) -> (f64, f64) {
    let mean = mean.clamp(1e-12, 1.0 - 1e-12);
    let bound = mean * (1.0 - mean);
    let var = var.max(VARIANCE_FLOOR).min(0.999 * bound);
    let alpha = mean * (bound / var - 1.0);
    let beta = alpha * (1.0 - mean) / mean;
    (alpha, beta)
}

fn weighted_moments(obs: &[f64], weights: impl Iterator<Item = f64> + Clone) -> (f64, f64, f64) {
    let wsum: f64 = weights.clone().sum();
    if wsum < COLLAPSE_WEIGHT {
        return (wsum, f64::NAN, f64::NAN);
    }
    let mean = weights.clone().zip(obs).map(|(w, x)| w * x).sum::<f64>() / wsum;
    let var = weights.zip(obs).map(|(w, x)| w * (x - mean) * (x - mean)).sum::<f64>() / wsum;
    (wsum, mean, var)
}

/// M-step: weighted method of moments per component, λ as mean responsibility.
pub fn m_step(obs: &[f64], gamma: &[[f64; 2]]) -> Result<BetaMixture> {
    if obs.len() < 2 {
        return Err(Error::invalid("obs", format!("need at least 2 observations, got {}", obs.len())));
    }
    if gamma.len() != obs.len() {
        return Err(Error::shape("m_step", obs.len(), gamma.len()));
    }
    let n = obs.len() as f64;
    let mut lambda = [0.0; 2];
    let mut alpha = [1.0; 2];
    let mut beta = [1.0; 2];
    let mut collapsed = false;
    for k in 0..2 {
        let (wsum, mean, var) = weighted_moments(obs, gamma.iter().map(move |g| g[k]));
        if wsum < COLLAPSE_WEIGHT {
            collapsed = true;
            continue;
        }
        let (a, b) = moments_to_shape(mean, var);
        alpha[k] = a;
        beta[k] = b;
        lambda[k] = wsum / n;
    }
    if collapsed {
        lambda = [0.5, 0.5];
    } else {
        let s = lambda[0] + lambda[1];
        lambda = [lambda[0] / s, lambda[1] / s];
    }
    let mut m = BetaMixture { lambda, alpha, beta, clean_component: 0, degenerate: false };
    m.assign_clean();
    Ok(m)
}

/// Median-split initialization: unweighted moments of the lower and upper halves.
pub fn initial_mixture(obs: &[f64]) -> BetaMixture {
    let mut sorted = obs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let half = sorted.len() / 2;
    let (lo, hi) = sorted.split_at(half);
    let shape = |part: &[f64]| {
        let (_, mean, var) = weighted_moments(part, std::iter::repeat_n(1.0, part.len()));
        moments_to_shape(mean, var)
    };
    let (a0, b0) = shape(lo);
    let (a1, b1) = shape(hi);
    let mut m =
        BetaMixture { lambda: [0.5, 0.5], alpha: [a0, a1], beta: [b0, b1], clean_component: 0, degenerate: false };
    m.assign_clean();
    m
}

/// Fits the two-component beta mixture by EM.
pub fn fit_bmm(obs: &[f64], max_iters: usize) -> Result<BetaMixture> {
    check_observations(obs, 10)?;
    let n = obs.len() as f64;
    let mean = obs.iter().sum::<f64>() / n;
    let var = obs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var < 1e-12 {
        return Ok(BetaMixture::symmetric_uniform());
    }
    let mut model = initial_mixture(obs);
    for _ in 0..max_iters {
        let gamma = e_step(obs, &model);
        let next = m_step(obs, &gamma)?;
        let change = next.max_abs_change(&model);
        model = next;
        if change < CONVERGENCE_TOL {
            break;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Beta, Distribution};

    fn trapezoid_normalized(x: f64, a: f64, b: f64) -> f64 {
        let f = |t: f64| t.powf(a - 1.0) * (1.0 - t).powf(b - 1.0);
        let n = 200_000;
        let h = 1.0 / n as f64;
        let mut s = 0.5 * (f(0.0) + f(1.0));
        for i in 1..n {
            s += f(i as f64 * h);
        }
        f(x) / (s * h)
    }

    #[test]
    fn beta_pdf_examples() {
        assert!((beta_pdf(0.3, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-14);
        assert!((beta_pdf(0.5, 2.0, 2.0).unwrap() - 1.5).abs() < 1e-13);
        let oracle = trapezoid_normalized(0.2, 2.0, 8.0);
        assert!((beta_pdf(0.2, 2.0, 8.0).unwrap() - oracle).abs() < 1e-8);
    }

    #[test]
    fn beta_pdf_rejects_unbounded_x() {
        assert!(beta_pdf(0.0, 2.0, 2.0).is_err());
        assert!(beta_pdf(1.0, 2.0, 2.0).is_err());
        assert!(beta_pdf(0.5, 0.0, 2.0).is_err());
    }

    #[test]
    fn e_step_examples() {
        let m = BetaMixture::new([0.5, 0.5], [2.0, 2.0], [3.0, 3.0]).unwrap();
        for g in e_step(&[0.1, 0.5, 0.9], &m) {
            assert_eq!(g, [0.5, 0.5]);
        }
        let m = BetaMixture::new([1.0, 0.0], [2.0, 8.0], [8.0, 2.0]).unwrap();
        for g in e_step(&[0.1, 0.5, 0.9], &m) {
            assert_eq!(g, [1.0, 0.0]);
        }
        let m = BetaMixture::new([0.5, 0.5], [2.0, 8.0], [8.0, 2.0]).unwrap();
        let g = e_step(&[0.1], &m)[0];
        let p0 = 0.5 * beta_pdf(0.1, 2.0, 8.0).unwrap();
        let p1 = 0.5 * beta_pdf(0.1, 8.0, 2.0).unwrap();
        assert!((g[0] - p0 / (p0 + p1)).abs() < 1e-10);
        assert!((g[1] - p1 / (p0 + p1)).abs() < 1e-10);
    }

    #[test]
    fn e_step_underflow_assigns_half() {
        let m = BetaMixture {
            lambda: [0.0, 0.0],
            alpha: [2.0, 2.0],
            beta: [2.0, 2.0],
            clean_component: 0,
            degenerate: false,
        };
        assert_eq!(m.responsibilities(0.3), [0.5, 0.5]);
        assert_eq!(m.posterior_noisy(0.3), 0.5);
    }

    #[test]
    fn m_step_hand_example() {
        let m = m_step(&[0.2, 0.4], &[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        assert!((m.alpha[0] - 6.0).abs() < 1e-9);
        assert!((m.beta[0] - 14.0).abs() < 1e-9);
        // collapsed component is reset to Beta(1, 1) with an even split
        assert_eq!((m.alpha[1], m.beta[1]), (1.0, 1.0));
        assert_eq!(m.lambda, [0.5, 0.5]);
    }

    #[test]
    fn m_step_symmetric_responsibilities() {
        let obs = [0.1, 0.3, 0.35, 0.8, 0.6];
        let m = m_step(&obs, &[[0.5, 0.5]; 5]).unwrap();
        assert_eq!(m.alpha[0], m.alpha[1]);
        assert_eq!(m.beta[0], m.beta[1]);
        assert_eq!(m.lambda, [0.5, 0.5]);
        assert_eq!(m.clean_component, 0);
    }

    #[test]
    fn m_step_floors_variance() {
        let m = m_step(&[0.3, 0.3, 0.3], &[[1.0, 0.0]; 3]).unwrap();
        let (a, b) = moments_to_shape(0.3, VARIANCE_FLOOR);
        assert_eq!((m.alpha[0], m.beta[0]), (a, b));
        assert!(a.is_finite() && b.is_finite());
    }

    #[test]
    fn moment_guard_keeps_shapes_positive() {
        let (a, b) = moments_to_shape(0.5, 0.3);
        assert!(a > 0.0 && b > 0.0);
    }

    #[test]
    fn m_step_recovers_true_memberships() {
        let mut r = rng::seeded(11);
        let (c, n) = (Beta::new(2.0, 8.0).unwrap(), Beta::new(8.0, 2.0).unwrap());
        let mut obs = Vec::new();
        let mut gamma = Vec::new();
        for i in 0..10_000 {
            if i < 4_000 {
                obs.push(c.sample(&mut r));
                gamma.push([1.0, 0.0]);
            } else {
                obs.push(n.sample(&mut r));
                gamma.push([0.0, 1.0]);
            }
        }
        let m = m_step(&obs, &gamma).unwrap();
        assert!((m.mean(0) - 0.2).abs() < 0.02);
        assert!((m.mean(1) - 0.8).abs() < 0.02);
        assert!((m.lambda[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn fit_requires_ten_observations() {
        assert!(fit_bmm(&[0.5; 9], 10).is_err());
    }

    #[test]
    fn fit_degenerate_observations() {
        let obs: Vec<f64> = (0..50).map(|i| 0.5 + (i as f64 - 25.0) * 1e-10).collect();
        let m = fit_bmm(&obs, 10).unwrap();
        assert!(m.degenerate);
        for &x in &obs {
            assert!((m.posterior_noisy(x) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_separated_mixture_and_posterior_extremes() {
        let mut r = rng::seeded(21);
        let (c, n) = (Beta::new(2.0, 8.0).unwrap(), Beta::new(8.0, 2.0).unwrap());
        let obs: Vec<f64> = (0..10_000)
            .map(|i| if i % 2 == 0 { c.sample(&mut r) } else { n.sample(&mut r) })
            .map(|x: f64| x.clamp(1e-4, 1.0 - 1e-4))
            .collect();
        let m = fit_bmm(&obs, 10).unwrap();
        let (ci, ni) = (m.clean_component, m.noisy_component());
        assert!((m.mean(ci) - 0.2).abs() < 0.05);
        assert!((m.mean(ni) - 0.8).abs() < 0.05);
        assert!((m.lambda[ci] - 0.5).abs() < 0.05);
        // modes of Beta(8,2) and Beta(2,8)
        assert!(m.posterior_noisy(7.0 / 8.0) >= 0.99);
        assert!(m.posterior_noisy(1.0 / 8.0) <= 0.01);
        assert!(m.posterior_noisy(m.mean(ni)) > m.posterior_noisy(m.mean(ci)));
    }

    #[test]
    fn clean_tie_prefers_index_zero() {
        let m = BetaMixture::new([0.3, 0.7], [2.0, 4.0], [2.0, 4.0]).unwrap();
        assert_eq!(m.clean_component, 0);
        let m = BetaMixture::new([0.3, 0.7], [3.0, 1.0], [2.0, 4.0]).unwrap();
        assert_eq!(m.clean_component, 1);
    }
}
