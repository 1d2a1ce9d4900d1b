//! Closed-form benchmark densities: a 25-mode Gaussian-mixture prior on a
//! 5x5 grid, a reward that selects and re-weights 9 of its modes, and the
//! resulting unnormalized posterior. All mixtures use unit covariance.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Grid coordinates shared by the prior means.
pub const GRID: [f64; 5] = [-10.0, -5.0, 0.0, 5.0, 10.0];

/// The 9 selected posterior means.
pub const POSTERIOR_MEANS: [[f64; 2]; 9] = [
    [-10.0, -5.0],
    [-5.0, -10.0],
    [-5.0, 0.0],
    [10.0, -5.0],
    [0.0, 0.0],
    [0.0, 5.0],
    [5.0, -5.0],
    [5.0, 0.0],
    [5.0, 10.0],
];

/// Unnormalized posterior mode weights; they sum to 61.
pub const POSTERIOR_WEIGHTS: [f64; 9] = [4.0, 10.0, 4.0, 5.0, 10.0, 5.0, 4.0, 15.0, 4.0];

/// Evenly weighted unit-covariance Gaussian mixture.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmTarget {
    pub means: Vec<[f64; 2]>,
}

impl GmmTarget {
    /// The 25-mode benchmark prior on the `GRID x GRID` lattice.
    pub fn grid25() -> Self {
        let mut means = Vec::with_capacity(25);
        for &x in &GRID {
            for &y in &GRID {
                means.push([x, y]);
            }
        }
        GmmTarget { means }
    }

    pub fn num_modes(&self) -> usize {
        self.means.len()
    }
}

/// Selected means, unnormalized weights, and an inverse temperature applied
/// to the log-reward.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RewardSpec {
    pub means: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub beta: f64,
}

impl RewardSpec {
    pub fn benchmark9() -> Self {
        RewardSpec {
            means: POSTERIOR_MEANS.to_vec(),
            weights: POSTERIOR_WEIGHTS.to_vec(),
            beta: 1.0,
        }
    }

    pub fn weight_total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Exact log-normalizer of the unnormalized posterior, `log sum(weights)`.
    pub fn true_log_z(&self) -> f64 {
        self.weight_total().ln()
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

/// `log N(x; mu, I)` exponent terms for a weighted unit-covariance mixture:
/// `log sum_i w_i exp(-|x - mu_i|^2 / 2) - log(2 pi)` with `w_i` given in
/// log space.
fn mixture_log_density(x: &[f64; 2], means: &[[f64; 2]], log_weights: &[f64]) -> f64 {
    let terms: Vec<f64> = means
        .iter()
        .zip(log_weights)
        .map(|(mu, lw)| {
            let dx = x[0] - mu[0];
            let dy = x[1] - mu[1];
            lw - 0.5 * (dx * dx + dy * dy)
        })
        .collect();
    log_sum_exp(&terms) - (2.0 * std::f64::consts::PI).ln()
}

/// Gradient of a weighted unit-covariance mixture log-density: the
/// responsibility-weighted sum of `(mu_i - x)`.
fn mixture_log_density_grad(x: &[f64; 2], means: &[[f64; 2]], log_weights: &[f64]) -> [f64; 2] {
    let terms: Vec<f64> = means
        .iter()
        .zip(log_weights)
        .map(|(mu, lw)| {
            let dx = x[0] - mu[0];
            let dy = x[1] - mu[1];
            lw - 0.5 * (dx * dx + dy * dy)
        })
        .collect();
    let lse = log_sum_exp(&terms);
    let mut grad = [0.0; 2];
    for (mu, term) in means.iter().zip(&terms) {
        let resp = (term - lse).exp();
        grad[0] += resp * (mu[0] - x[0]);
        grad[1] += resp * (mu[1] - x[1]);
    }
    grad
}

/// Exact prior mixture log-density.
pub fn prior_log_density(g: &GmmTarget, x: &[f64; 2]) -> f64 {
    let n = g.means.len() as f64;
    let log_w = vec![-n.ln(); g.means.len()];
    mixture_log_density(x, &g.means, &log_w)
}

pub fn prior_log_density_grad(g: &GmmTarget, x: &[f64; 2]) -> [f64; 2] {
    let n = g.means.len() as f64;
    let log_w = vec![-n.ln(); g.means.len()];
    mixture_log_density_grad(x, &g.means, &log_w)
}

/// `log sum_i w_i N(x; mu_i, I)` with the spec's unnormalized weights.
pub fn unnorm_posterior_log_density(r: &RewardSpec, x: &[f64; 2]) -> f64 {
    let log_w: Vec<f64> = r.weights.iter().map(|w| w.ln()).collect();
    mixture_log_density(x, &r.means, &log_w)
}

pub fn unnorm_posterior_log_density_grad(r: &RewardSpec, x: &[f64; 2]) -> [f64; 2] {
    let log_w: Vec<f64> = r.weights.iter().map(|w| w.ln()).collect();
    mixture_log_density_grad(x, &r.means, &log_w)
}

/// Log-reward `beta * (log posterior~ - log prior)`, defined so that
/// `prior * reward` reproduces the unnormalized posterior at `beta = 1`.
pub fn log_reward(r: &RewardSpec, g: &GmmTarget, x: &[f64; 2]) -> f64 {
    r.beta * (unnorm_posterior_log_density(r, x) - prior_log_density(g, x))
}

/// Analytic gradient of [`log_reward`].
pub fn log_reward_grad(r: &RewardSpec, g: &GmmTarget, x: &[f64; 2]) -> [f64; 2] {
    let gp = unnorm_posterior_log_density_grad(r, x);
    let gq = prior_log_density_grad(g, x);
    [r.beta * (gp[0] - gq[0]), r.beta * (gp[1] - gq[1])]
}

/// Exact draw from the evenly weighted prior mixture.
pub fn prior_sample<R: Rng>(g: &GmmTarget, rng: &mut R) -> [f64; 2] {
    let mu = g.means[rng.gen_range(0..g.means.len())];
    let n1: f64 = rng.sample(StandardNormal);
    let n2: f64 = rng.sample(StandardNormal);
    [mu[0] + n1, mu[1] + n2]
}

/// Exact draw from the normalized 9-mode posterior: categorical over
/// `weights / sum(weights)`, then a unit Gaussian around the chosen mean.
pub fn posterior_sample<R: Rng>(r: &RewardSpec, rng: &mut R) -> [f64; 2] {
    let total = r.weight_total();
    let mut u = rng.gen_range(0.0..total);
    let mut idx = r.weights.len() - 1;
    for (i, w) in r.weights.iter().enumerate() {
        if u < *w {
            idx = i;
            break;
        }
        u -= w;
    }
    let mu = r.means[idx];
    let n1: f64 = rng.sample(StandardNormal);
    let n2: f64 = rng.sample(StandardNormal);
    [mu[0] + n1, mu[1] + n2]
}
