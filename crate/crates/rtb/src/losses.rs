//! Training objectives over full trajectories.
//!
//! `tb_*` fits a sampler to a known unnormalized terminal density against
//! the fixed bridge (used for prior pretraining). `Rtb*` fine-tunes a
//! posterior sampler against a frozen prior sampler and a reward, as the
//! squared log-ratio `(log Z + log p_post(tau) - log r(x_1) - log p_prior(tau))^2`.
//! Gradients flow into the posterior and `log Z` only; the prior is always
//! evaluated without a tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::Tape;
use crate::diffusion::{
    backward_log_prob, traj_log_prob, DriftGrads, DriftNet, RewardGradFn, Schedule,
    StagedDriftNet, Trajectory,
};

/// Posterior sampler: a drift net plus the learnable log-normalizer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosteriorModel {
    pub net: DriftNet,
    pub log_z: f64,
}

impl PosteriorModel {
    /// Parameter copy of the prior with `log_z = 0`. With `langevin` a
    /// zero-initialized scalar head is attached, so the copy still samples
    /// exactly like the prior.
    pub fn from_prior<R: Rng>(prior: &DriftNet, langevin: bool, rng: &mut R) -> Self {
        let net = if langevin {
            prior.clone_with_langevin(rng)
        } else {
            prior.clone()
        };
        PosteriorModel { net, log_z: 0.0 }
    }
}

/// Gradients for a [`PosteriorModel`].
#[derive(Clone, Debug)]
pub struct PosteriorGrads {
    pub net: DriftGrads,
    pub log_z: f64,
}

impl PosteriorGrads {
    pub fn zeros_like(model: &PosteriorModel) -> Self {
        PosteriorGrads { net: DriftGrads::zeros_like(&model.net), log_z: 0.0 }
    }

    pub fn scale(&mut self, c: f64) {
        self.net.scale(c);
        self.log_z *= c;
    }

    pub fn add(&mut self, other: &PosteriorGrads) {
        self.net.add(&other.net);
        self.log_z += other.log_z;
    }
}

/// Loss shaping knobs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    /// Skip updates on trajectories whose squared residual falls below this.
    pub clip_threshold: f64,
    /// Backpropagate through only this many uniformly chosen transitions,
    /// rescaled to stay unbiased. `None` keeps all of them.
    pub subsample_keep: Option<usize>,
    pub use_vargrad: bool,
    pub use_langevin: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            clip_threshold: 0.1,
            subsample_keep: None,
            use_vargrad: false,
            use_langevin: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Trajectory balance against the fixed bridge (prior pretraining).
// ---------------------------------------------------------------------------

/// Signed residual `log_z + log p(tau) - log target(x_1) - log q(tau | x_1)`.
pub fn tb_residual(
    net: &DriftNet,
    log_z: f64,
    sched: &Schedule,
    traj: &Trajectory,
    target_log_density: f64,
    reward_grad: Option<RewardGradFn>,
) -> f64 {
    assert!(target_log_density.is_finite(), "non-finite target density");
    assert!(log_z.is_finite(), "non-finite log_z");
    log_z + traj_log_prob(net, sched, traj, reward_grad) - target_log_density
        - backward_log_prob(sched, traj)
}

/// Squared TB residual.
pub fn tb_loss(
    net: &DriftNet,
    log_z: f64,
    sched: &Schedule,
    traj: &Trajectory,
    target_log_density: f64,
) -> f64 {
    let r = tb_residual(net, log_z, sched, traj, target_log_density, None);
    r * r
}

/// Loss value and gradients of [`tb_loss`] w.r.t. the net and `log_z`.
pub fn tb_grad(
    net: &DriftNet,
    log_z: f64,
    sched: &Schedule,
    traj: &Trajectory,
    target_log_density: f64,
    reward_grad: Option<RewardGradFn>,
) -> (f64, DriftGrads, f64) {
    assert!(target_log_density.is_finite(), "non-finite target density");
    let mut tape = Tape::new();
    let staged = StagedDriftNet::stage(&mut tape, net);
    let step_nodes = staged.step_log_prob_nodes(&mut tape, sched, traj, reward_grad);
    let log_z_node = tape.leaf_scalar(log_z);

    let mut terms = vec![log_z_node];
    terms.extend_from_slice(&step_nodes);
    let partial = tape.add_n(&terms);
    let offset = -target_log_density - backward_log_prob(sched, traj);
    let residual = tape.add_const(partial, &[offset]);
    let loss = tape.square(residual);

    let adj = tape.backward(loss);
    let grads = staged.grads(&adj, net);
    let log_z_grad = adj.get_or_zeros(log_z_node, 1)[0];
    (tape.scalar_value(loss), grads, log_z_grad)
}

// ---------------------------------------------------------------------------
// Relative trajectory balance (posterior fine-tuning).
// ---------------------------------------------------------------------------

/// One fine-tuning problem: frozen prior, trainable posterior, shared
/// schedule, and an optional reward-score provider for Langevin nets.
pub struct RtbInstance<'a> {
    pub prior: &'a DriftNet,
    pub post: &'a PosteriorModel,
    pub sched: &'a Schedule,
    pub reward_grad: Option<RewardGradFn<'a>>,
}

impl<'a> RtbInstance<'a> {
    pub fn new(prior: &'a DriftNet, post: &'a PosteriorModel, sched: &'a Schedule) -> Self {
        RtbInstance { prior, post, sched, reward_grad: None }
    }

    pub fn with_reward_grad(mut self, f: RewardGradFn<'a>) -> Self {
        self.reward_grad = Some(f);
        self
    }

    fn prior_log_prob(&self, traj: &Trajectory) -> f64 {
        // The prior is evaluated with the same score provider in case it
        // carries a Langevin head itself.
        let rg = if self.prior.is_langevin() { self.reward_grad } else { None };
        traj_log_prob(self.prior, self.sched, traj, rg)
    }

    fn post_reward_grad(&self) -> Option<RewardGradFn<'a>> {
        if self.post.net.is_langevin() {
            self.reward_grad
        } else {
            None
        }
    }

    /// Signed residual `delta = log_z + log p_post(tau) - log r(x_1) - log p_prior(tau)`.
    pub fn residual(&self, traj: &Trajectory, log_r: f64) -> f64 {
        assert!(log_r.is_finite(), "non-finite log reward");
        self.post.log_z + traj_log_prob(&self.post.net, self.sched, traj, self.post_reward_grad())
            - log_r
            - self.prior_log_prob(traj)
    }

    /// Squared residual with clipping: 0 (no update) when
    /// `delta^2 < cfg.clip_threshold`.
    pub fn loss(&self, traj: &Trajectory, log_r: f64, cfg: &LossConfig) -> f64 {
        let delta = self.residual(traj, log_r);
        let sq = delta * delta;
        if sq < cfg.clip_threshold {
            0.0
        } else {
            sq
        }
    }

    /// Full-tape gradient of the clipped squared residual. Returns the loss
    /// value, the residual, and `None` gradients when the trajectory is
    /// clipped out.
    pub fn grad(
        &self,
        traj: &Trajectory,
        log_r: f64,
        cfg: &LossConfig,
    ) -> (f64, f64, Option<PosteriorGrads>) {
        assert!(log_r.is_finite(), "non-finite log reward");
        let offset = -log_r - self.prior_log_prob(traj);

        let mut tape = Tape::new();
        let staged = StagedDriftNet::stage(&mut tape, &self.post.net);
        let step_nodes =
            staged.step_log_prob_nodes(&mut tape, self.sched, traj, self.post_reward_grad());
        let log_z_node = tape.leaf_scalar(self.post.log_z);

        let mut terms = vec![log_z_node];
        terms.extend_from_slice(&step_nodes);
        let partial = tape.add_n(&terms);
        let residual = tape.add_const(partial, &[offset]);
        let loss = tape.square(residual);

        let delta = tape.scalar_value(residual);
        let sq = tape.scalar_value(loss);
        if sq < cfg.clip_threshold {
            return (0.0, delta, None);
        }

        let adj = tape.backward(loss);
        let grads = PosteriorGrads {
            net: staged.grads(&adj, &self.post.net),
            log_z: adj.get_or_zeros(log_z_node, 1)[0],
        };
        (sq, delta, Some(grads))
    }

    /// Unbiased subsampled gradient: the residual uses all transitions but
    /// gradient flows only through the 1-based transitions in `keep`, scaled
    /// by `T / |keep|`. `log_z` always receives its full gradient `2 delta`.
    pub fn subsampled_grad(
        &self,
        traj: &Trajectory,
        log_r: f64,
        keep: &[usize],
    ) -> PosteriorGrads {
        assert!(!keep.is_empty(), "subsampled gradient needs a nonempty keep set");
        let delta = self.residual(traj, log_r);

        let mut tape = Tape::new();
        let staged = StagedDriftNet::stage(&mut tape, &self.post.net);
        let nodes = staged.step_log_prob_nodes_subset(
            &mut tape,
            self.sched,
            traj,
            self.post_reward_grad(),
            Some(keep),
        );
        let root = tape.add_n(&nodes);
        let adj = tape.backward(root);

        let mut net = staged.grads(&adj, &self.post.net);
        net.scale(2.0 * delta * self.sched.steps as f64 / keep.len() as f64);
        PosteriorGrads { net, log_z: 2.0 * delta }
    }

    /// Gradient computed as `2 delta * grad(log_z + sum_i log p_post(step i))`
    /// with the residual held constant, accumulating per-step likelihood
    /// gradients over chunks of at most `chunk_size` transitions so no tape
    /// ever spans the whole trajectory.
    pub fn two_pass_grad(
        &self,
        traj: &Trajectory,
        log_r: f64,
        chunk_size: usize,
    ) -> PosteriorGrads {
        assert!(chunk_size >= 1, "chunk size must be at least 1");
        let delta = self.residual(traj, log_r);

        let mut net = DriftGrads::zeros_like(&self.post.net);
        let all: Vec<usize> = (1..=self.sched.steps).collect();
        for chunk in all.chunks(chunk_size) {
            let mut tape = Tape::new();
            let staged = StagedDriftNet::stage(&mut tape, &self.post.net);
            let nodes = staged.step_log_prob_nodes_subset(
                &mut tape,
                self.sched,
                traj,
                self.post_reward_grad(),
                Some(chunk),
            );
            let root = tape.add_n(&nodes);
            let adj = tape.backward(root);
            net.add(&staged.grads(&adj, &self.post.net));
        }
        net.scale(2.0 * delta);
        PosteriorGrads { net, log_z: 2.0 * delta }
    }

    /// The quantity whose batch variance the VarGrad objective minimizes:
    /// `v = log p_prior(tau) + log r(x_1) - log p_post(tau)`.
    pub fn vargrad_v(&self, traj: &Trajectory, log_r: f64) -> f64 {
        assert!(log_r.is_finite(), "non-finite log reward");
        self.prior_log_prob(traj) + log_r
            - traj_log_prob(&self.post.net, self.sched, traj, self.post_reward_grad())
    }

    /// Gradient of [`vargrad_rtb_loss`] over a batch, flowing into the
    /// posterior net only. Also returns the loss value.
    pub fn vargrad_grad(&self, batch: &[(&Trajectory, f64)]) -> (f64, DriftGrads) {
        assert!(batch.len() >= 2, "vargrad needs at least two trajectories");
        let vs: Vec<f64> = batch.iter().map(|(t, lr)| self.vargrad_v(t, *lr)).collect();
        let loss = vargrad_rtb_loss(&vs);
        let mean = vs.iter().sum::<f64>() / vs.len() as f64;
        let k = vs.len() as f64;

        let mut total = DriftGrads::zeros_like(&self.post.net);
        for ((traj, _), v) in batch.iter().zip(&vs) {
            // d loss / d v_k = (2/K)(v_k - mean); dv/dphi = -dlogp_post/dphi.
            let weight = -(2.0 / k) * (v - mean);
            if weight == 0.0 {
                continue;
            }
            let mut tape = Tape::new();
            let staged = StagedDriftNet::stage(&mut tape, &self.post.net);
            let nodes =
                staged.step_log_prob_nodes(&mut tape, self.sched, traj, self.post_reward_grad());
            let root = tape.add_n(&nodes);
            let adj = tape.backward(root);
            let mut g = staged.grads(&adj, &self.post.net);
            g.scale(weight);
            total.add(&g);
        }
        (loss, total)
    }
}

/// Sample variance of the per-trajectory quantities, `(1/K) sum (v - mean)^2`.
/// No `log_z` parameter is involved.
pub fn vargrad_rtb_loss(vs: &[f64]) -> f64 {
    assert!(vs.len() >= 2, "vargrad needs at least two trajectories");
    let k = vs.len() as f64;
    let mean = vs.iter().sum::<f64>() / k;
    vs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k
}

/// Implicit normalizer estimate from a VarGrad batch: the mean of `v`.
pub fn vargrad_log_z_estimate(vs: &[f64]) -> f64 {
    assert!(!vs.is_empty(), "empty batch");
    vs.iter().sum::<f64>() / vs.len() as f64
}
