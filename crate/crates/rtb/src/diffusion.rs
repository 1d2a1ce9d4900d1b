//! Forward (denoising) process with Gaussian transitions, the fixed
//! backward (noising) Brownian-bridge process, and exact trajectory
//! log-likelihoods for both.
//!
//! The chain runs `x_0 -> x_{dt} -> ... -> x_1` with `x_0` pinned at the
//! origin. Transition `i` draws `x_{i dt} ~ N(x + u(x, t) dt, sigma^2 dt I)`
//! where `u` is a learned drift. Trajectory densities are taken over the free
//! coordinates `x_{dt}..x_1`; the point mass at `x_0` contributes nothing and
//! cancels in every ratio the losses build.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{Adjoints, MlpGrads, MlpParams, NodeId, StagedMlp, Tape};

/// Number of sinusoidal features the drift nets receive in place of raw `t`.
pub const TIME_FEATURES: usize = 8;

/// State coordinates are multiplied by this before entering the nets; the
/// benchmark targets live on a +-10 grid and tanh layers saturate on raw
/// inputs of that size.
pub const DEFAULT_INPUT_SCALE: f64 = 0.1;

/// Time discretization and noise budget: `T` steps of size `dt = 1/T`, each
/// with transition variance `sigma2_total * dt`, so the total variance
/// accumulated over the unit interval is `sigma2_total`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: usize,
    pub sigma2_total: f64,
}

impl Schedule {
    pub fn new(steps: usize, sigma2_total: f64) -> Self {
        assert!(steps >= 2, "schedule needs at least 2 steps");
        assert!(sigma2_total > 0.0, "sigma2_total must be positive");
        Schedule { steps, sigma2_total }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Per-step transition variance `sigma^2 dt`.
    pub fn step_var(&self) -> f64 {
        self.sigma2_total * self.dt()
    }
}

/// Per-step log-densities cached by whichever sampler produced a trajectory.
#[derive(Clone, Debug)]
pub enum Behavior {
    /// One entry per forward transition `x_{(i-1)dt} -> x_{i dt}`, `i = 1..T`.
    Forward(Vec<f64>),
    /// One entry per bridge factor `q(x_{(i-1)dt} | x_{i dt})`, `i = 2..T`.
    Backward(Vec<f64>),
}

impl Behavior {
    pub fn total(&self) -> f64 {
        match self {
            Behavior::Forward(v) | Behavior::Backward(v) => v.iter().sum(),
        }
    }
}

/// Ordered states `x_0..x_1`, one row per step, plus optional cached
/// behavior log-densities.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub behavior: Option<Behavior>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// Number of transitions (`T`).
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("empty trajectory")
    }

    pub fn all_finite(&self) -> bool {
        self.states.iter().all(|x| x.iter().all(|v| v.is_finite()))
    }

    /// One CSV row per step: `step,x1,..,xd`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        let d = self.dim();
        let header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        writeln!(w, "step,{}", header.join(","))?;
        for (i, x) in self.states.iter().enumerate() {
            let row: Vec<String> = x.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{i},{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Learned drift `u(x, t)`: a base net mapping `(scaled x, features(t))` to a
/// vector, plus an optional scalar head that gates an externally supplied
/// reward score into the drift.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DriftNet {
    pub base: MlpParams,
    pub langevin_head: Option<MlpParams>,
    pub input_scale: f64,
}

/// Gradients matching a [`DriftNet`].
#[derive(Clone, Debug)]
pub struct DriftGrads {
    pub base: MlpGrads,
    pub head: Option<MlpGrads>,
}

impl DriftGrads {
    pub fn zeros_like(net: &DriftNet) -> Self {
        DriftGrads {
            base: MlpGrads::zeros_like(&net.base),
            head: net.langevin_head.as_ref().map(MlpGrads::zeros_like),
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.base.scale(c);
        if let Some(h) = &mut self.head {
            h.scale(c);
        }
    }

    pub fn add(&mut self, other: &DriftGrads) {
        self.base.add(&other.base);
        if let (Some(a), Some(b)) = (&mut self.head, &other.head) {
            a.add(b);
        }
    }
}

impl DriftNet {
    /// Random net with the given hidden sizes. With `langevin` the scalar
    /// head is created with a zeroed final layer, so initially the net
    /// behaves exactly like its base.
    pub fn seeded<R: Rng>(
        dim: usize,
        hidden: &[usize],
        activation: crate::ad::Activation,
        langevin: bool,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![dim + TIME_FEATURES];
        sizes.extend_from_slice(hidden);
        let mut base_sizes = sizes.clone();
        base_sizes.push(dim);
        let base = MlpParams::seeded(&base_sizes, activation, rng);
        let langevin_head = langevin.then(|| {
            let mut head_sizes = sizes;
            head_sizes.push(1);
            let mut head = MlpParams::seeded(&head_sizes, activation, rng);
            head.zero_final_layer();
            head
        });
        DriftNet { base, langevin_head, input_scale: DEFAULT_INPUT_SCALE }
    }

    pub fn dim(&self) -> usize {
        self.base.out_dim()
    }

    pub fn is_langevin(&self) -> bool {
        self.langevin_head.is_some()
    }

    /// Copy with a fresh (initially inert) scalar head attached when the
    /// source has none.
    pub fn clone_with_langevin<R: Rng>(&self, rng: &mut R) -> Self {
        let mut out = self.clone();
        if out.langevin_head.is_none() {
            let dim = self.dim();
            let hidden: Vec<usize> = self.base.layers[..self.base.layers.len() - 1]
                .iter()
                .map(|l| l.out_dim)
                .collect();
            let mut sizes = vec![dim + TIME_FEATURES];
            sizes.extend_from_slice(&hidden);
            sizes.push(1);
            let mut head = MlpParams::seeded(&sizes, self.base.activation, rng);
            head.zero_final_layer();
            out.langevin_head = Some(head);
        }
        out
    }

    pub fn net_input(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut input = Vec::with_capacity(x.len() + TIME_FEATURES);
        input.extend(x.iter().map(|v| v * self.input_scale));
        input.extend_from_slice(&time_features(t));
        input
    }
}

/// Sinusoidal embedding of `t` with geometrically spaced frequencies.
pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    for k in 0..TIME_FEATURES / 2 {
        let freq = std::f64::consts::PI * (1 << k) as f64;
        out[2 * k] = (freq * t).sin();
        out[2 * k + 1] = (freq * t).cos();
    }
    out
}

/// Reward score provider used by Langevin-parametrized nets, mapping a state
/// to the gradient of the log-reward at that state.
pub type RewardGradFn<'a> = &'a (dyn Fn(&[f64]) -> Vec<f64> + Sync);

/// Evaluate the drift at `(x, t)`. Langevin nets require `reward_grad`.
pub fn drift_eval(
    net: &DriftNet,
    x: &[f64],
    t: f64,
    reward_grad: Option<&[f64]>,
) -> Vec<f64> {
    let input = net.net_input(x, t);
    let mut u = crate::ad::mlp_forward_raw(&net.base, &input);
    if let Some(head) = &net.langevin_head {
        let grad = reward_grad.expect("langevin drift needs the log-reward gradient");
        assert_eq!(grad.len(), x.len(), "reward gradient dimension mismatch");
        let gate = crate::ad::mlp_forward_raw(head, &input)[0];
        for (ui, gi) in u.iter_mut().zip(grad) {
            *ui += gate * gi;
        }
    }
    u
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite drift at step {step}")]
    NonFiniteDrift { step: usize },
}

/// Log-density of `N(mean, var I)` at `x`.
pub fn log_gaussian(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let d = x.len() as f64;
    let mut ss = 0.0;
    for (xi, mi) in x.iter().zip(mean) {
        let dev = xi - mi;
        ss += dev * dev;
    }
    -0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - ss / (2.0 * var)
}

/// Euler-Maruyama rollout under an arbitrary drift function.
///
/// `extra_var` is added to the transition variance (exploration noise); the
/// cached behavior log-prob uses the actual sampling variance.
pub fn sample_forward_with<F, R>(
    drift: F,
    dim: usize,
    sched: &Schedule,
    rng: &mut R,
    extra_var: f64,
) -> Result<Trajectory, SimError>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
    R: Rng,
{
    assert!(extra_var >= 0.0, "extra variance must be nonnegative");
    let t_steps = sched.steps;
    let dt = sched.dt();
    let var = sched.step_var() + extra_var;
    let std = var.sqrt();

    let mut states = Vec::with_capacity(t_steps + 1);
    let mut step_log_probs = Vec::with_capacity(t_steps);
    states.push(vec![0.0; dim]);

    for i in 0..t_steps {
        let t = i as f64 * dt;
        let x = &states[i];
        let u = drift(x, t);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFiniteDrift { step: i + 1 });
        }
        let mut mean = vec![0.0; dim];
        for j in 0..dim {
            mean[j] = x[j] + u[j] * dt;
        }
        let mut next = vec![0.0; dim];
        for j in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            next[j] = mean[j] + std * noise;
        }
        step_log_probs.push(log_gaussian(&next, &mean, var));
        states.push(next);
    }

    Ok(Trajectory { states, behavior: Some(Behavior::Forward(step_log_probs)) })
}

/// Rollout under a [`DriftNet`].
pub fn sample_forward<R: Rng>(
    net: &DriftNet,
    sched: &Schedule,
    reward_grad: Option<RewardGradFn>,
    rng: &mut R,
    extra_var: f64,
) -> Result<Trajectory, SimError> {
    if net.is_langevin() {
        let grad_fn = reward_grad.expect("langevin sampling needs a reward gradient function");
        sample_forward_with(
            |x, t| drift_eval(net, x, t, Some(&grad_fn(x))),
            net.dim(),
            sched,
            rng,
            extra_var,
        )
    } else {
        sample_forward_with(|x, t| drift_eval(net, x, t, None), net.dim(), sched, rng, extra_var)
    }
}

/// Log-likelihood of a trajectory under the net's own transition densities,
/// excluding the (fixed) initial point.
pub fn traj_log_prob(
    net: &DriftNet,
    sched: &Schedule,
    traj: &Trajectory,
    reward_grad: Option<RewardGradFn>,
) -> f64 {
    step_log_probs(net, sched, traj, reward_grad).iter().sum()
}

/// The per-transition terms of [`traj_log_prob`].
pub fn step_log_probs(
    net: &DriftNet,
    sched: &Schedule,
    traj: &Trajectory,
    reward_grad: Option<RewardGradFn>,
) -> Vec<f64> {
    assert_eq!(traj.steps(), sched.steps, "trajectory does not match schedule");
    let dt = sched.dt();
    let var = sched.step_var();
    let dim = traj.dim();

    let mut out = Vec::with_capacity(sched.steps);
    for i in 0..sched.steps {
        let t = i as f64 * dt;
        let x = &traj.states[i];
        let grad = reward_grad.map(|f| f(x));
        let u = drift_eval(net, x, t, grad.as_deref());
        let mut mean = vec![0.0; dim];
        for j in 0..dim {
            mean[j] = x[j] + u[j] * dt;
        }
        let lp = log_gaussian(&traj.states[i + 1], &mean, var);
        assert!(lp.is_finite(), "non-finite transition density at step {}", i + 1);
        out.push(lp);
    }
    out
}

/// A [`DriftNet`] staged on a tape for differentiation.
pub struct StagedDriftNet {
    base: StagedMlp,
    head: Option<StagedMlp>,
    input_scale: f64,
}

impl StagedDriftNet {
    pub fn stage(tape: &mut Tape, net: &DriftNet) -> Self {
        StagedDriftNet {
            base: StagedMlp::stage(tape, &net.base),
            head: net.langevin_head.as_ref().map(|h| StagedMlp::stage(tape, h)),
            input_scale: net.input_scale,
        }
    }

    /// Drift node at `(x, t)`; mirrors [`drift_eval`] on the tape.
    pub fn drift(
        &self,
        tape: &mut Tape,
        x: &[f64],
        t: f64,
        reward_grad: Option<&[f64]>,
    ) -> NodeId {
        let mut input = Vec::with_capacity(x.len() + TIME_FEATURES);
        input.extend(x.iter().map(|v| v * self.input_scale));
        input.extend_from_slice(&time_features(t));
        let u = self.base.forward(tape, &input);
        match &self.head {
            None => u,
            Some(head) => {
                let grad = reward_grad.expect("langevin drift needs the log-reward gradient");
                let gate = head.forward(tape, &input);
                let gate_vec = tape.broadcast(gate, x.len());
                let grad_leaf = tape.leaf_vector(grad);
                let scaled = tape.mul(gate_vec, grad_leaf);
                tape.add(u, scaled)
            }
        }
    }

    /// Per-transition log-density nodes for `traj`; the taped counterpart of
    /// [`step_log_probs`].
    pub fn step_log_prob_nodes(
        &self,
        tape: &mut Tape,
        sched: &Schedule,
        traj: &Trajectory,
        reward_grad: Option<RewardGradFn>,
    ) -> Vec<NodeId> {
        self.step_log_prob_nodes_subset(tape, sched, traj, reward_grad, None)
    }

    /// Like [`Self::step_log_prob_nodes`] but restricted to the 1-based
    /// transitions listed in `keep` (all transitions when `None`).
    pub fn step_log_prob_nodes_subset(
        &self,
        tape: &mut Tape,
        sched: &Schedule,
        traj: &Trajectory,
        reward_grad: Option<RewardGradFn>,
        keep: Option<&[usize]>,
    ) -> Vec<NodeId> {
        assert_eq!(traj.steps(), sched.steps, "trajectory does not match schedule");
        let dt = sched.dt();
        let var = sched.step_var();
        let dim = traj.dim();
        let norm_const = -0.5 * dim as f64 * (2.0 * std::f64::consts::PI * var).ln();

        let indices: Vec<usize> = match keep {
            Some(k) => k.to_vec(),
            None => (1..=sched.steps).collect(),
        };
        let mut out = Vec::with_capacity(indices.len());
        for step in indices {
            assert!(step >= 1 && step <= sched.steps, "transition index out of range");
            let i = step - 1;
            let t = i as f64 * dt;
            let x = &traj.states[i];
            let grad = reward_grad.map(|f| f(x));
            let u = self.drift(tape, x, t, grad.as_deref());
            // deviation = (x_next - x) - u dt
            let diff: Vec<f64> = traj.states[i + 1].iter().zip(x).map(|(a, b)| a - b).collect();
            let neg_udt = tape.scale(u, -dt);
            let dev = tape.add_const(neg_udt, &diff);
            let ss = tape.sum_sq(dev);
            let scaled = tape.scale(ss, -1.0 / (2.0 * var));
            out.push(tape.add_const(scaled, &[norm_const]));
        }
        out
    }

    pub fn grads(&self, adjoints: &Adjoints, net: &DriftNet) -> DriftGrads {
        DriftGrads {
            base: self.base.grads(adjoints, &net.base),
            head: self
                .head
                .as_ref()
                .zip(net.langevin_head.as_ref())
                .map(|(staged, params)| staged.grads(adjoints, params)),
        }
    }
}

/// Noising trajectory: pins `x_1 = terminal` and `x_0 = 0`, filling the
/// intermediates with a Brownian bridge whose per-step variance matches the
/// schedule.
pub fn sample_backward<R: Rng>(sched: &Schedule, terminal: &[f64], rng: &mut R) -> Trajectory {
    let t_steps = sched.steps;
    let dim = terminal.len();
    let var = sched.step_var();

    let mut states = vec![vec![0.0; dim]; t_steps + 1];
    states[t_steps] = terminal.to_vec();
    let mut step_log_probs = vec![0.0; t_steps.saturating_sub(1)];

    for i in (2..=t_steps).rev() {
        let shrink = (i - 1) as f64 / i as f64;
        let step_var = var * shrink;
        let std = step_var.sqrt();
        let mut prev = vec![0.0; dim];
        for j in 0..dim {
            let mean = states[i][j] * shrink;
            let noise: f64 = rng.sample(StandardNormal);
            prev[j] = mean + std * noise;
        }
        let mean: Vec<f64> = states[i].iter().map(|v| v * shrink).collect();
        step_log_probs[i - 2] = log_gaussian(&prev, &mean, step_var);
        states[i - 1] = prev;
    }
    // x_0 is the origin by construction.

    Trajectory { states, behavior: Some(Behavior::Backward(step_log_probs)) }
}

/// Log-density of the bridge `q(x_0..x_{1-dt} | x_1)` for a trajectory in
/// forward orientation. The pinned `x_0` contributes no factor.
pub fn backward_log_prob(sched: &Schedule, traj: &Trajectory) -> f64 {
    assert_eq!(traj.steps(), sched.steps, "trajectory does not match schedule");
    let var = sched.step_var();
    let mut total = 0.0;
    for i in (2..=sched.steps).rev() {
        let shrink = (i - 1) as f64 / i as f64;
        let step_var = var * shrink;
        let mean: Vec<f64> = traj.states[i].iter().map(|v| v * shrink).collect();
        let lp = log_gaussian(&traj.states[i - 1], &mean, step_var);
        assert!(lp.is_finite(), "non-finite bridge density at step {i}");
        total += lp;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_net(dim: usize) -> DriftNet {
        DriftNet {
            base: MlpParams::zeros(&[dim + TIME_FEATURES, 4, dim], Activation::Tanh),
            langevin_head: None,
            input_scale: DEFAULT_INPUT_SCALE,
        }
    }

    fn seeded_net(dim: usize, seed: u64) -> DriftNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DriftNet::seeded(dim, &[8, 8], Activation::Tanh, false, &mut rng)
    }

    #[test]
    fn zero_drift_walk_is_cumulative_noise() {
        let sched = Schedule::new(2, 1.0);
        let net = zero_net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traj = sample_forward(&net, &sched, None, &mut rng, 0.0).unwrap();

        // Replay the same noise stream manually.
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let std = sched.step_var().sqrt();
        let mut x = vec![0.0; 2];
        for i in 1..=2 {
            for j in 0..2 {
                let n: f64 = rng2.sample(StandardNormal);
                x[j] += std * n;
            }
            for j in 0..2 {
                assert!((traj.states[i][j] - x[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn on_policy_behavior_matches_traj_log_prob() {
        let sched = Schedule::new(7, 5.0);
        let net = seeded_net(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let traj = sample_forward(&net, &sched, None, &mut rng, 0.0).unwrap();
            let cached = traj.behavior.as_ref().unwrap().total();
            let recomputed = traj_log_prob(&net, &sched, &traj, None);
            assert!((cached - recomputed).abs() < 1e-10);
        }
    }

    #[test]
    fn exploration_noise_changes_behavior_density() {
        let sched = Schedule::new(5, 5.0);
        let net = seeded_net(2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let traj = sample_forward(&net, &sched, None, &mut rng, 0.25 / 5.0).unwrap();
        let cached = traj.behavior.as_ref().unwrap().total();
        let model = traj_log_prob(&net, &sched, &traj, None);
        assert!((cached - model).abs() > 1e-6);
    }

    #[test]
    fn exploration_variance_empirical_check() {
        // One-step increments with extra_var = eps^2/T for eps = 0.5.
        let sched = Schedule::new(5, 5.0);
        let net = zero_net(1);
        let eps: f64 = 0.5;
        let extra = eps * eps / sched.steps as f64;
        let expected_var = sched.step_var() + extra;

        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let traj = sample_forward(&net, &sched, None, &mut rng, extra).unwrap();
            let v = traj.states[1][0];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        // Var of the sample variance of a Gaussian ~ 2 var^2 / n.
        let se = (2.0 * expected_var * expected_var / n as f64).sqrt();
        assert!(
            (var - expected_var).abs() < 3.0 * se,
            "empirical {var} vs expected {expected_var} (se {se})"
        );
    }

    #[test]
    fn one_step_density_at_mean_is_minus_log_2pi() {
        // d = 2, sigma^2 dt = 1, landing exactly on the mean.
        let sched = Schedule::new(2, 2.0);
        assert!((sched.step_var() - 1.0).abs() < 1e-15);
        let lp = log_gaussian(&[0.3, -0.7], &[0.3, -0.7], sched.step_var());
        assert!((lp - (-(2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
    }

    #[test]
    fn traj_log_prob_matches_per_step_oracle() {
        let sched = Schedule::new(6, 5.0);
        let net = seeded_net(2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let traj = sample_forward(&net, &sched, None, &mut rng, 0.1).unwrap();

        // Hand-summed Gaussian log-densities.
        let dt = sched.dt();
        let var = sched.step_var();
        let mut expected = 0.0;
        for i in 0..sched.steps {
            let x = &traj.states[i];
            let u = drift_eval(&net, x, i as f64 * dt, None);
            let mut ss = 0.0;
            for j in 0..2 {
                let dev = traj.states[i + 1][j] - x[j] - u[j] * dt;
                ss += dev * dev;
            }
            expected += -(2.0 * std::f64::consts::PI * var).ln() - ss / (2.0 * var);
        }
        let got = traj_log_prob(&net, &sched, &traj, None);
        assert!((got - expected).abs() < 1e-10);
    }

    #[test]
    fn identical_nets_give_zero_log_prob_difference() {
        let sched = Schedule::new(5, 5.0);
        let net = seeded_net(2, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let traj = sample_forward(&net, &sched, None, &mut rng, 0.0).unwrap();
        let a = traj_log_prob(&net, &sched, &traj, None);
        let b = traj_log_prob(&net, &sched, &traj, None);
        assert_eq!(a, b);
    }

    #[test]
    fn langevin_drift_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut net = DriftNet::seeded(2, &[8], Activation::Tanh, true, &mut rng);
        // Give the head a nonzero final layer so the gate is active.
        let head = net.langevin_head.as_mut().unwrap();
        let last = head.layers.last_mut().unwrap();
        last.w.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * (i as f64 + 1.0));
        last.b[0] = 0.2;

        let x = [0.4, -1.1];
        let t = 0.3;
        let grad = [2.0, -3.0];

        // Hand composition: NN1 + NN2 * grad.
        let input = net.net_input(&x, t);
        let nn1 = crate::ad::mlp_forward_raw(&net.base, &input);
        let nn2 = crate::ad::mlp_forward_raw(net.langevin_head.as_ref().unwrap(), &input)[0];
        let expected = [nn1[0] + nn2 * grad[0], nn1[1] + nn2 * grad[1]];

        let got = drift_eval(&net, &x, t, Some(&grad));
        assert!((got[0] - expected[0]).abs() < 1e-12);
        assert!((got[1] - expected[1]).abs() < 1e-12);

        // Zero reward gradient reduces to the base net.
        let plain = drift_eval(&net, &x, t, Some(&[0.0, 0.0]));
        assert!((plain[0] - nn1[0]).abs() < 1e-12);
        assert!((plain[1] - nn1[1]).abs() < 1e-12);

        // A zeroed head reduces to the plain parametrization.
        net.langevin_head.as_mut().unwrap().zero_final_layer();
        let gated_off = drift_eval(&net, &x, t, Some(&grad));
        assert!((gated_off[0] - nn1[0]).abs() < 1e-12);
        assert!((gated_off[1] - nn1[1]).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "langevin drift needs the log-reward gradient")]
    fn langevin_without_gradient_panics() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let net = DriftNet::seeded(2, &[4], Activation::Tanh, true, &mut rng);
        drift_eval(&net, &[0.0, 0.0], 0.5, None);
    }

    #[test]
    fn backward_bridge_two_step_moments() {
        // T = 2: single intermediate has mean x1/2 and variance step_var/2.
        let sched = Schedule::new(2, 5.0);
        let x1 = [2.0, -1.0];
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut sum = [0.0; 2];
        let mut sum_sq = [0.0; 2];
        for _ in 0..n {
            let traj = sample_backward(&sched, &x1, &mut rng);
            for j in 0..2 {
                sum[j] += traj.states[1][j];
                sum_sq[j] += traj.states[1][j] * traj.states[1][j];
            }
        }
        let expected_var = sched.step_var() / 2.0;
        for j in 0..2 {
            let mean = sum[j] / n as f64;
            let var = sum_sq[j] / n as f64 - mean * mean;
            let mean_se = (expected_var / n as f64).sqrt();
            let var_se = (2.0 * expected_var * expected_var / n as f64).sqrt();
            assert!((mean - x1[j] / 2.0).abs() < 3.0 * mean_se);
            assert!((var - expected_var).abs() < 3.0 * var_se);
        }
    }

    #[test]
    fn backward_bridge_midpoint_marginal() {
        // Marginal of x_{1/2} under the bridge: mean x1/2, variance
        // sigma2_total * (1/2) * (1/2).
        let sched = Schedule::new(8, 5.0);
        let x1 = [4.0];
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let traj = sample_backward(&sched, &x1, &mut rng);
            let v = traj.states[4][0];
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let expected_var = sched.sigma2_total * 0.25;
        let mean_se = (expected_var / n as f64).sqrt();
        let var_se = (2.0 * expected_var * expected_var / n as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * mean_se, "mean {mean}");
        assert!((var - expected_var).abs() < 3.0 * var_se, "var {var}");
    }

    #[test]
    fn backward_log_prob_matches_generation() {
        let sched = Schedule::new(9, 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..10 {
            let traj = sample_backward(&sched, &[1.5, -0.5], &mut rng);
            let cached = traj.behavior.as_ref().unwrap().total();
            let recomputed = backward_log_prob(&sched, &traj);
            assert!((cached - recomputed).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_log_prob_per_step_oracle() {
        let sched = Schedule::new(4, 2.0);
        let traj = Trajectory {
            states: vec![
                vec![0.0, 0.0],
                vec![0.3, -0.1],
                vec![0.9, 0.4],
                vec![1.2, 0.2],
                vec![2.0, -1.0],
            ],
            behavior: None,
        };
        let var = sched.step_var();
        let mut expected = 0.0;
        for i in (2..=4usize).rev() {
            let shrink = (i - 1) as f64 / i as f64;
            let mean: Vec<f64> = traj.states[i].iter().map(|v| v * shrink).collect();
            expected += log_gaussian(&traj.states[i - 1], &mean, var * shrink);
        }
        let got = backward_log_prob(&sched, &traj);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn drift_free_terminal_covariance_is_total_variance() {
        let sched = Schedule::new(10, 5.0);
        let net = zero_net(2);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut sum = [0.0; 2];
        let mut sum_sq = [0.0; 2];
        let mut cross = 0.0;
        for _ in 0..n {
            let traj = sample_forward(&net, &sched, None, &mut rng, 0.0).unwrap();
            let x = traj.terminal();
            for j in 0..2 {
                sum[j] += x[j];
                sum_sq[j] += x[j] * x[j];
            }
            cross += x[0] * x[1];
        }
        let expected = sched.sigma2_total;
        let var_se = (2.0 * expected * expected / n as f64).sqrt();
        for j in 0..2 {
            let mean = sum[j] / n as f64;
            let var = sum_sq[j] / n as f64 - mean * mean;
            assert!((var - expected).abs() < 3.0 * var_se, "var[{j}] = {var}");
        }
        let cov = cross / n as f64 - (sum[0] / n as f64) * (sum[1] / n as f64);
        let cov_se = (expected * expected / n as f64).sqrt();
        assert!(cov.abs() < 3.0 * cov_se, "cov = {cov}");
    }

    #[test]
    fn doubling_steps_preserves_drift_free_terminal_law() {
        let net = zero_net(1);
        let n = 50_000;
        let mut moments = Vec::new();
        for (seed, steps) in [(20u64, 10usize), (21, 20)] {
            let sched = Schedule::new(steps, 5.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let traj = sample_forward(&net, &sched, None, &mut rng, 0.0).unwrap();
                let v = traj.terminal()[0];
                sum += v;
                sum_sq += v * v;
            }
            moments.push((sum / n as f64, sum_sq / n as f64));
        }
        let var_se = (2.0 * 25.0 / n as f64).sqrt() * (2.0f64).sqrt();
        assert!((moments[0].0 - moments[1].0).abs() < 3.0 * (5.0 / n as f64).sqrt() * 1.5);
        assert!((moments[0].1 - moments[1].1).abs() < 3.0 * var_se);
    }

    #[test]
    fn taped_step_log_probs_match_raw_and_finite_differences() {
        let sched = Schedule::new(4, 5.0);
        let net = seeded_net(2, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let traj = sample_forward(&net, &sched, None, &mut rng, 0.0).unwrap();

        let raw = step_log_probs(&net, &sched, &traj, None);
        let mut tape = Tape::new();
        let staged = StagedDriftNet::stage(&mut tape, &net);
        let nodes = staged.step_log_prob_nodes(&mut tape, &sched, &traj, None);
        for (node, expect) in nodes.iter().zip(&raw) {
            assert!((tape.scalar_value(*node) - expect).abs() < 1e-12);
        }

        // Gradient of the total log-prob vs central finite differences.
        let root = tape.add_n(&nodes);
        let adj = tape.backward(root);
        let grads = staged.grads(&adj, &net);

        let h = 1e-5;
        let eval = |p: &DriftNet| traj_log_prob(p, &sched, &traj, None);
        for li in 0..net.base.layers.len() {
            for wi in (0..net.base.layers[li].w.len()).step_by(7) {
                let mut plus = net.clone();
                plus.base.layers[li].w[wi] += h;
                let mut minus = net.clone();
                minus.base.layers[li].w[wi] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let got = grads.base.w[li][wi];
                let denom = fd.abs().max(1e-6);
                assert!(
                    (got - fd).abs() / denom < 1e-4,
                    "layer {li} w[{wi}]: {got} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn trajectory_csv_has_one_row_per_step() {
        let sched = Schedule::new(3, 1.0);
        let net = zero_net(2);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let traj = sample_forward(&net, &sched, None, &mut rng, 0.0).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.trim().lines().collect();
        assert_eq!(lines.len(), 5); // header + 4 states
        assert_eq!(lines[0], "step,x1,x2");
        assert!(lines[1].starts_with("0,0,0"));
    }
}
