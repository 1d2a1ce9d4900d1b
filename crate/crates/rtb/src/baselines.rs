//! Comparison methods: REINFORCE with a mean baseline and per-step KL
//! regularization toward the prior, and classifier-guidance sampling that
//! adds the reward score to the prior drift without any training.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::Tape;
use crate::diffusion::{
    drift_eval, DriftGrads, DriftNet, Schedule, StagedDriftNet, Trajectory,
};

/// Policy-gradient configuration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RlConfig {
    /// KL penalty weight alpha; 0 disables regularization.
    pub kl_weight: f64,
}

impl RlConfig {
    pub fn new(kl_weight: f64) -> Self {
        assert!(kl_weight >= 0.0, "KL weight must be nonnegative");
        RlConfig { kl_weight }
    }
}

/// Classifier-guidance configuration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CgConfig {
    pub guidance_scale: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig { guidance_scale: 1.0 }
    }
}

/// KL between two Gaussian transitions sharing variance `step_var` whose
/// means differ by `(u_policy - u_prior) dt`:
/// `|du|^2 dt^2 / (2 step_var) = |du|^2 dt / (2 sigma^2)`.
pub fn gaussian_step_kl(u_policy: &[f64], u_prior: &[f64], dt: f64, step_var: f64) -> f64 {
    let mut ss = 0.0;
    for (a, b) in u_policy.iter().zip(u_prior) {
        let d = a - b;
        ss += d * d;
    }
    ss * dt * dt / (2.0 * step_var)
}

/// Sum of per-step KL terms between the policy and the prior along the
/// states of `traj`.
pub fn trajectory_kl(
    policy: &DriftNet,
    prior: &DriftNet,
    sched: &Schedule,
    traj: &Trajectory,
) -> f64 {
    let dt = sched.dt();
    let var = sched.step_var();
    let mut total = 0.0;
    for i in 0..sched.steps {
        let t = i as f64 * dt;
        let x = &traj.states[i];
        let u_pol = drift_eval(policy, x, t, None);
        let u_pri = drift_eval(prior, x, t, None);
        total += gaussian_step_kl(&u_pol, &u_pri, dt, var);
    }
    total
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ReinforceStats {
    pub mean_log_reward: f64,
    pub mean_kl: f64,
    pub mean_return: f64,
}

/// Score-function gradient of the KL-regularized return over an on-policy
/// batch, with the batch mean as baseline:
/// `R(tau) = log r(x_1) - alpha * sum_i KL_i`,
/// `grad J = E[(R - mean R) grad log pi(tau)]`.
///
/// Returns the *descent* gradient of `-J` (ready for a minimizer) plus
/// batch statistics.
pub fn reinforce_kl_gradient(
    policy: &DriftNet,
    prior: &DriftNet,
    sched: &Schedule,
    batch: &[Trajectory],
    log_rewards: &[f64],
    cfg: &RlConfig,
) -> (DriftGrads, ReinforceStats) {
    assert_eq!(batch.len(), log_rewards.len(), "batch and reward lengths differ");
    assert!(!batch.is_empty(), "empty batch");

    let kls: Vec<f64> = batch
        .par_iter()
        .map(|traj| trajectory_kl(policy, prior, sched, traj))
        .collect();
    let returns: Vec<f64> = log_rewards
        .iter()
        .zip(&kls)
        .map(|(lr, kl)| lr - cfg.kl_weight * kl)
        .collect();
    let n = batch.len() as f64;
    let baseline = returns.iter().sum::<f64>() / n;

    let per_traj: Vec<DriftGrads> = batch
        .par_iter()
        .zip(&returns)
        .map(|(traj, ret)| {
            // Descent direction: -(R - b)/n * grad log pi.
            let weight = -(ret - baseline) / n;
            let mut tape = Tape::new();
            let staged = StagedDriftNet::stage(&mut tape, policy);
            let nodes = staged.step_log_prob_nodes(&mut tape, sched, traj, None);
            let root = tape.add_n(&nodes);
            let adj = tape.backward(root);
            let mut g = staged.grads(&adj, policy);
            g.scale(weight);
            g
        })
        .collect();

    let mut total = DriftGrads::zeros_like(policy);
    for g in &per_traj {
        total.add(g);
    }

    let stats = ReinforceStats {
        mean_log_reward: log_rewards.iter().sum::<f64>() / n,
        mean_kl: kls.iter().sum::<f64>() / n,
        mean_return: baseline,
    };
    (total, stats)
}

/// Guided drift `u_prior(x, t) + g * sigma^2 * grad log r(x)`; sampling with
/// it realizes the classifier-guidance baseline with no training.
pub fn cg_drift(
    prior: &DriftNet,
    x: &[f64],
    t: f64,
    reward_grad: &dyn Fn(&[f64]) -> Vec<f64>,
    sched: &Schedule,
    cfg: &CgConfig,
) -> Vec<f64> {
    let mut u = drift_eval(prior, x, t, None);
    if cfg.guidance_scale != 0.0 {
        let score = reward_grad(x);
        assert_eq!(score.len(), u.len(), "reward gradient dimension mismatch");
        for (ui, si) in u.iter_mut().zip(&score) {
            *ui += cfg.guidance_scale * sched.sigma2_total * si;
        }
    }
    u
}
