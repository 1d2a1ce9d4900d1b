//! Adam optimizer over flat parameter tensors.

use serde::{Deserialize, Serialize};

use super::{MlpGrads, MlpParams};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Whether an update was applied or skipped because of non-finite gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdamOutcome {
    Applied,
    SkippedNonFinite,
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    /// `tensor_lens` gives the flat length of each tensor the optimizer
    /// expects, in the order they will be passed to [`AdamState::step`].
    pub fn new(tensor_lens: &[usize], cfg: AdamConfig) -> Self {
        AdamState {
            m: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            cfg,
        }
    }

    pub fn for_mlp(params: &MlpParams, cfg: AdamConfig) -> Self {
        let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self::new(&lens, cfg)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update in place. Skips the whole update (and
    /// the step counter) if any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> AdamOutcome {
        assert_eq!(params.len(), self.m.len(), "adam: tensor count mismatch");
        assert_eq!(grads.len(), self.m.len(), "adam: gradient count mismatch");
        for (g, m) in grads.iter().zip(&self.m) {
            assert_eq!(g.len(), m.len(), "adam: tensor shape mismatch");
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return AdamOutcome::SkippedNonFinite;
        }

        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        AdamOutcome::Applied
    }
}

/// Adam update for a whole MLP.
pub fn adam_step(state: &mut AdamState, params: &mut MlpParams, grads: &MlpGrads) -> AdamOutcome {
    let grad_tensors = grads.tensors();
    let mut param_tensors = params.tensors_mut();
    state.step(&mut param_tensors, &grad_tensors)
}
