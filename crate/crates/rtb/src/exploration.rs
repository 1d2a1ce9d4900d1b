//! Off-policy machinery: annealed exploration noise, a replay buffer of
//! high-reward terminal samples, and backward-noising of known samples into
//! training trajectories.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_backward, Schedule, Trajectory};

/// Linearly annealed exploration noise: the sampler's per-step variance gets
/// an extra `eps(k)^2 / T` with `eps(k) = eps0 * max(0, 1 - k/horizon)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ExplorationSchedule {
    pub eps0: f64,
    pub horizon: usize,
}

impl ExplorationSchedule {
    pub fn new(eps0: f64, horizon: usize) -> Self {
        assert!(eps0 >= 0.0, "eps0 must be nonnegative");
        ExplorationSchedule { eps0, horizon }
    }

    /// Extra per-step variance at iteration `k`.
    pub fn current_extra_var(&self, k: usize, sched: &Schedule) -> f64 {
        if self.horizon == 0 || k >= self.horizon {
            return 0.0;
        }
        let eps = self.eps0 * (1.0 - k as f64 / self.horizon as f64);
        eps * eps / sched.steps as f64
    }
}

/// FIFO store of terminal samples with their log-rewards.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<(Vec<f64>, f64)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        ReplayBuffer { capacity, entries: VecDeque::with_capacity(capacity.min(4096)) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, terminal: Vec<f64>, log_reward: f64) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((terminal, log_reward));
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> &(Vec<f64>, f64) {
        assert!(!self.is_empty(), "cannot sample from an empty buffer");
        &self.entries[rng.gen_range(0..self.entries.len())]
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Vec<f64>, f64)> {
        self.entries.iter()
    }
}

/// Noise `n` terminal samples from `source` backward into full trajectories,
/// returned in forward orientation and directly usable by the balance losses.
pub fn offpolicy_batch<R, F>(
    mut source: F,
    sched: &Schedule,
    rng: &mut R,
    n: usize,
) -> Vec<Trajectory>
where
    R: Rng,
    F: FnMut(&mut R) -> Vec<f64>,
{
    (0..n)
        .map(|_| {
            let terminal = source(rng);
            sample_backward(sched, &terminal, rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{posterior_sample, RewardSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn extra_var_anneal_values() {
        let sched = Schedule::new(100, 5.0);
        let s = ExplorationSchedule::new(0.5, 1000);
        assert!((s.current_extra_var(0, &sched) - 0.25 / 100.0).abs() < 1e-15);
        assert!((s.current_extra_var(500, &sched) - 0.0625 / 100.0).abs() < 1e-15);
        assert_eq!(s.current_extra_var(1000, &sched), 0.0);
        assert_eq!(s.current_extra_var(5000, &sched), 0.0);
    }

    #[test]
    fn extra_var_is_nonincreasing() {
        let sched = Schedule::new(40, 5.0);
        let s = ExplorationSchedule::new(0.5, 321);
        let mut prev = f64::INFINITY;
        for k in 0..400 {
            let v = s.current_extra_var(k, &sched);
            assert!(v <= prev + 1e-15);
            assert!(v >= 0.0);
            prev = v;
        }
    }

    #[test]
    fn buffer_is_fifo_and_capacity_bounded() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(vec![i as f64], i as f64);
        }
        assert_eq!(buf.len(), 3);
        let kept: Vec<f64> = buf.iter().map(|(x, _)| x[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn offpolicy_trajectories_pin_their_terminals() {
        let sched = Schedule::new(10, 5.0);
        let r = RewardSpec::benchmark9();
        let mut rng = ChaCha8Rng::seed_from_u64(1);

        let mut drawn = Vec::new();
        let batch = offpolicy_batch(
            |rng: &mut ChaCha8Rng| {
                let x = posterior_sample(&r, rng);
                drawn.push(x);
                vec![x[0], x[1]]
            },
            &sched,
            &mut rng,
            50,
        );
        assert_eq!(batch.len(), 50);
        for (traj, x) in batch.iter().zip(&drawn) {
            assert_eq!(traj.terminal(), &[x[0], x[1]]);
            assert_eq!(traj.states[0], vec![0.0, 0.0]);
            assert!(traj.all_finite());
            // Terminals all sit in one of the 9 selected mode regions.
            let nearest = r
                .means
                .iter()
                .map(|mu| (x[0] - mu[0]).powi(2) + (x[1] - mu[1]).powi(2))
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 25.0);
        }
    }

    #[test]
    fn buffer_sourced_batch_reproduces_buffer_contents() {
        let sched = Schedule::new(6, 5.0);
        let mut buf = ReplayBuffer::new(8);
        for i in 0..8 {
            buf.push(vec![i as f64, -(i as f64)], 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = offpolicy_batch(
            |rng: &mut ChaCha8Rng| buf.sample(rng).0.clone(),
            &sched,
            &mut rng,
            20,
        );
        for traj in &batch {
            let x = traj.terminal();
            assert!(buf.iter().any(|(b, _)| b == x));
        }
    }
}
