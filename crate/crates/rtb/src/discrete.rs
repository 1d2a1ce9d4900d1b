//! Autoregressive instantiation of the balance objective on a fully
//! enumerable sequence space. Policies are tabular (one logit row per
//! prefix), so the exact posterior, the exact normalizer, and the learned
//! marginal can all be enumerated and compared directly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{AdamConfig, AdamState};

/// Prefix-indexed autoregressive policy over `vocab^len` sequences.
///
/// Prefixes of length `l < len` are numbered `(V^l - 1)/(V - 1) + base-V
/// value of the prefix`, a bijection onto `0..(V^len - 1)/(V - 1)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TabularAR {
    pub vocab: usize,
    pub len: usize,
    /// Flat logit table, one row of `vocab` entries per prefix.
    pub logits: Vec<f64>,
}

impl TabularAR {
    pub fn uniform(vocab: usize, len: usize) -> Self {
        assert!(vocab >= 2 && len >= 1);
        let rows = prefix_count(vocab, len);
        TabularAR { vocab, len, logits: vec![0.0; rows * vocab] }
    }

    pub fn seeded<R: Rng>(vocab: usize, len: usize, scale: f64, rng: &mut R) -> Self {
        let mut m = Self::uniform(vocab, len);
        for v in &mut m.logits {
            *v = rng.gen_range(-scale..scale);
        }
        m
    }

    pub fn num_prefixes(&self) -> usize {
        prefix_count(self.vocab, self.len)
    }

    pub fn num_sequences(&self) -> usize {
        self.vocab.pow(self.len as u32)
    }

    /// Row index for a (possibly empty) prefix.
    pub fn prefix_index(&self, prefix: &[usize]) -> usize {
        assert!(prefix.len() < self.len, "prefix must be shorter than the sequence length");
        let mut value = 0usize;
        for &tok in prefix {
            assert!(tok < self.vocab, "token out of range");
            value = value * self.vocab + tok;
        }
        offset(self.vocab, prefix.len()) + value
    }

    fn logit_row(&self, row: usize) -> &[f64] {
        &self.logits[row * self.vocab..(row + 1) * self.vocab]
    }

    /// Log-probability of the full sequence `x` under the chain of
    /// per-prefix softmaxes.
    pub fn log_prob(&self, x: &[usize]) -> f64 {
        assert_eq!(x.len(), self.len, "sequence length mismatch");
        let mut total = 0.0;
        for i in 0..self.len {
            let row = self.prefix_index(&x[..i]);
            total += log_softmax(self.logit_row(row), x[i]);
        }
        total
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let mut x = Vec::with_capacity(self.len);
        for i in 0..self.len {
            let row = self.prefix_index(&x[..i]);
            x.push(sample_softmax(self.logit_row(row), rng));
            let _ = i;
        }
        x
    }

    /// Exact probabilities of all `vocab^len` sequences, in sequence-index
    /// order.
    pub fn full_distribution(&self) -> Vec<f64> {
        let n = self.num_sequences();
        let mut out = Vec::with_capacity(n);
        for idx in 0..n {
            let x = seq_from_index(idx, self.vocab, self.len);
            out.push(self.log_prob(&x).exp());
        }
        out
    }
}

fn offset(vocab: usize, len: usize) -> usize {
    // (V^len - 1) / (V - 1)
    (vocab.pow(len as u32) - 1) / (vocab - 1)
}

fn prefix_count(vocab: usize, len: usize) -> usize {
    offset(vocab, len)
}

/// Sequence index as a base-`vocab` number, most significant token first.
pub fn seq_index(x: &[usize], vocab: usize) -> usize {
    x.iter().fold(0, |acc, &t| acc * vocab + t)
}

pub fn seq_from_index(mut idx: usize, vocab: usize, len: usize) -> Vec<usize> {
    let mut x = vec![0; len];
    for slot in x.iter_mut().rev() {
        *slot = idx % vocab;
        idx /= vocab;
    }
    x
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn log_softmax(logits: &[f64], idx: usize) -> f64 {
    logits[idx] - log_sum_exp(logits)
}

fn sample_softmax<R: Rng>(logits: &[f64], rng: &mut R) -> usize {
    let lse = log_sum_exp(logits);
    let mut u: f64 = rng.gen_range(0.0..1.0);
    for (i, l) in logits.iter().enumerate() {
        let p = (l - lse).exp();
        if u < p {
            return i;
        }
        u -= p;
    }
    logits.len() - 1
}

/// Positive reward on full sequences:
/// `log r(x) = zero_token_bonus * #{i : x_i = 0} + sum_i table[i][x_i]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeqReward {
    pub zero_token_bonus: f64,
    /// Per-position, per-token perturbations, `len` rows of `vocab` entries.
    pub table: Vec<Vec<f64>>,
}

impl SeqReward {
    pub fn flat(vocab: usize, len: usize) -> Self {
        SeqReward { zero_token_bonus: 0.0, table: vec![vec![0.0; vocab]; len] }
    }

    pub fn constant(vocab: usize, len: usize, log_value: f64) -> Self {
        let mut r = Self::flat(vocab, len);
        for row in &mut r.table {
            row.iter_mut().for_each(|v| *v = log_value / len as f64);
        }
        r
    }

    pub fn seeded<R: Rng>(vocab: usize, len: usize, zero_token_bonus: f64, rng: &mut R) -> Self {
        let table = (0..len)
            .map(|_| (0..vocab).map(|_| rng.gen_range(-0.5..0.5)).collect())
            .collect();
        SeqReward { zero_token_bonus, table }
    }

    pub fn log_reward(&self, x: &[usize]) -> f64 {
        assert_eq!(x.len(), self.table.len(), "sequence length mismatch");
        let zeros = x.iter().filter(|t| **t == 0).count() as f64;
        let perturb: f64 = x.iter().zip(&self.table).map(|(t, row)| row[*t]).sum();
        self.zero_token_bonus * zeros + perturb
    }
}

/// Exact posterior table and normalizer, by full enumeration.
#[derive(Clone, Debug)]
pub struct EnumeratedPosterior {
    /// Normalized posterior probability per sequence index.
    pub probs: Vec<f64>,
    /// `log sum_x r(x) p_prior(x)`.
    pub log_z: f64,
}

/// Enumerate `r(x) p(x)` over all sequences. Requires `vocab^len <= 1e6`.
pub fn enumerate_posterior(m: &TabularAR, r: &SeqReward) -> EnumeratedPosterior {
    let n = m.num_sequences();
    assert!(n <= 1_000_000, "sequence space too large to enumerate");
    let mut log_terms = Vec::with_capacity(n);
    for idx in 0..n {
        let x = seq_from_index(idx, m.vocab, m.len);
        log_terms.push(m.log_prob(&x) + r.log_reward(&x));
    }
    let log_z = log_sum_exp(&log_terms);
    let probs = log_terms.iter().map(|t| (t - log_z).exp()).collect();
    EnumeratedPosterior { probs, log_z }
}

/// Squared balance residual for one sequence:
/// `(log_z + log p_post(x) - log r(x) - log p_prior(x))^2`.
pub fn rtb_discrete_loss(
    prior: &TabularAR,
    post: &TabularAR,
    log_z: f64,
    x: &[usize],
    r: &SeqReward,
) -> f64 {
    let d = rtb_discrete_residual(prior, post, log_z, x, r);
    d * d
}

pub fn rtb_discrete_residual(
    prior: &TabularAR,
    post: &TabularAR,
    log_z: f64,
    x: &[usize],
    r: &SeqReward,
) -> f64 {
    log_z + post.log_prob(x) - r.log_reward(x) - prior.log_prob(x)
}

/// The exactly optimal posterior policy, built from suffix sums of
/// `r(x) p_prior(x)`: each prefix's logits are the log-masses of its
/// one-token extensions. Enumeration-based; the testing oracle.
pub fn posterior_optimal_policy(prior: &TabularAR, r: &SeqReward) -> (TabularAR, f64) {
    let vocab = prior.vocab;
    let len = prior.len;
    let n = prior.num_sequences();
    assert!(n <= 1_000_000, "sequence space too large to enumerate");

    // log-mass of every prefix of length l, for l = len down to 1.
    let mut post = TabularAR::uniform(vocab, len);
    let mut level: Vec<f64> = (0..n)
        .map(|idx| {
            let x = seq_from_index(idx, vocab, len);
            prior.log_prob(&x) + r.log_reward(&x)
        })
        .collect();
    for l in (0..len).rev() {
        // Fill logits for prefixes of length l from the masses at l+1.
        let rows = vocab.pow(l as u32);
        let mut next_level = Vec::with_capacity(rows);
        for row_value in 0..rows {
            let children = &level[row_value * vocab..(row_value + 1) * vocab];
            let row_idx = offset(vocab, l) + row_value;
            post.logits[row_idx * vocab..(row_idx + 1) * vocab].copy_from_slice(children);
            next_level.push(log_sum_exp(children));
        }
        level = next_level;
    }
    let log_z = level[0];
    (post, log_z)
}

/// Training configuration for the discrete fine-tuning loop.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DiscreteTrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub z_lr: f64,
    pub use_vargrad: bool,
    /// Fraction of each batch drawn from the exact posterior instead of
    /// on-policy (off-policy exploration).
    pub exact_sample_mix: f64,
    /// Anneal both learning rates linearly to zero over the run; averages
    /// away the stochastic-gradient jitter floor near the optimum.
    pub decay_lr: bool,
}

impl Default for DiscreteTrainConfig {
    fn default() -> Self {
        DiscreteTrainConfig {
            iters: 20_000,
            batch: 256,
            lr: 0.02,
            z_lr: 0.1,
            use_vargrad: false,
            exact_sample_mix: 0.0,
            decay_lr: true,
        }
    }
}

/// Snapshot of training progress.
#[derive(Clone, Copy, Debug)]
pub struct DiscreteTrainStats {
    pub iter: usize,
    pub loss: f64,
    pub log_z: f64,
}

/// Fine-tune a copy of `prior` toward `r(x) p_prior(x) / Z` by stochastic
/// gradient descent on the per-sequence balance loss. Returns the trained
/// policy and its normalizer estimate.
pub fn train_discrete<R: Rng>(
    prior: &TabularAR,
    r: &SeqReward,
    cfg: &DiscreteTrainConfig,
    rng: &mut R,
    mut on_stats: Option<&mut dyn FnMut(DiscreteTrainStats)>,
) -> (TabularAR, f64) {
    let mut post = prior.clone();
    let mut log_z = 0.0f64;
    let vocab = post.vocab;

    let mut opt = AdamState::new(&[post.logits.len()], AdamConfig::with_lr(cfg.lr));
    let mut z_opt = AdamState::new(&[1], AdamConfig::with_lr(cfg.z_lr));

    // Exact-posterior sampler for the off-policy mix, built once.
    let exact = (cfg.exact_sample_mix > 0.0).then(|| enumerate_posterior(prior, r));

    let mut grad = vec![0.0; post.logits.len()];
    // Running mean of the implicit normalizer estimate under VarGrad.
    let mut z_running = 0.0f64;

    for iter in 0..cfg.iters {
        if cfg.decay_lr {
            let frac = 1.0 - iter as f64 / cfg.iters as f64;
            opt.cfg.lr = cfg.lr * frac;
            z_opt.cfg.lr = cfg.z_lr * frac;
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut z_grad = 0.0;
        let mut loss_acc = 0.0;

        let batch: Vec<Vec<usize>> = (0..cfg.batch)
            .map(|b| {
                let use_exact = match &exact {
                    Some(_) => (b as f64 + 0.5) / (cfg.batch as f64) < cfg.exact_sample_mix,
                    None => false,
                };
                match (&exact, use_exact) {
                    (Some(e), true) => {
                        let u: f64 = rng.gen_range(0.0..1.0);
                        let mut acc = 0.0;
                        let mut idx = e.probs.len() - 1;
                        for (i, p) in e.probs.iter().enumerate() {
                            acc += p;
                            if u < acc {
                                idx = i;
                                break;
                            }
                        }
                        seq_from_index(idx, vocab, post.len)
                    }
                    _ => post.sample(rng),
                }
            })
            .collect();

        if cfg.use_vargrad {
            let vs: Vec<f64> = batch
                .iter()
                .map(|x| prior.log_prob(x) + r.log_reward(x) - post.log_prob(x))
                .collect();
            let k = vs.len() as f64;
            let mean = vs.iter().sum::<f64>() / k;
            loss_acc = vs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
            for (x, v) in batch.iter().zip(&vs) {
                let weight = -(2.0 / k) * (v - mean);
                accumulate_log_prob_grad(&post, x, weight, &mut grad);
            }
            z_running = if iter == 0 { mean } else { 0.99 * z_running + 0.01 * mean };
            log_z = z_running;
        } else {
            for x in &batch {
                let delta = rtb_discrete_residual(prior, &post, log_z, x, r);
                loss_acc += delta * delta;
                let w = 2.0 * delta / cfg.batch as f64;
                accumulate_log_prob_grad(&post, x, w, &mut grad);
                z_grad += w;
            }
            loss_acc /= cfg.batch as f64;
        }

        opt.step(&mut [&mut post.logits], &[&grad]);
        if !cfg.use_vargrad {
            let mut z_slice = [log_z];
            z_opt.step(&mut [&mut z_slice], &[&[z_grad]]);
            log_z = z_slice[0];
        }

        if let Some(cb) = on_stats.as_deref_mut() {
            cb(DiscreteTrainStats { iter, loss: loss_acc, log_z });
        }
    }

    (post, log_z)
}

/// d log p(x) / d logits, scaled by `weight`, added into `grad`.
fn accumulate_log_prob_grad(m: &TabularAR, x: &[usize], weight: f64, grad: &mut [f64]) {
    if weight == 0.0 {
        return;
    }
    for i in 0..m.len {
        let row = m.prefix_index(&x[..i]);
        let logits = &m.logits[row * m.vocab..(row + 1) * m.vocab];
        let lse = log_sum_exp(logits);
        for (j, l) in logits.iter().enumerate() {
            let softmax = (l - lse).exp();
            let indicator = if j == x[i] { 1.0 } else { 0.0 };
            grad[row * m.vocab + j] += weight * (indicator - softmax);
        }
    }
}

/// Total variation between two distributions over sequence indices.
pub fn distribution_tv(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// One CSV row per sequence: tokens, prior probability, reward, exact
/// posterior, learned posterior.
pub fn write_posterior_csv<W: std::io::Write>(
    prior: &TabularAR,
    r: &SeqReward,
    exact: &EnumeratedPosterior,
    learned: &TabularAR,
    w: &mut W,
) -> std::io::Result<()> {
    writeln!(w, "sequence,prior_prob,reward,exact_posterior,learned_posterior")?;
    let learned_probs = learned.full_distribution();
    for idx in 0..prior.num_sequences() {
        let x = seq_from_index(idx, prior.vocab, prior.len);
        let tokens: Vec<String> = x.iter().map(|t| t.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{},{}",
            tokens.join(""),
            prior.log_prob(&x).exp(),
            r.log_reward(&x).exp(),
            exact.probs[idx],
            learned_probs[idx],
        )?;
    }
    Ok(())
}
