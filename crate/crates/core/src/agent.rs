//! Per-vehicle MPO learner over the hybrid action space: replay buffer,
//! retrace critic, nonparametric E-step, trust-region M-step and the optional
//! forward-KL pull toward a group policy.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::coordinator::{AgentSnapshot, GroupPolicy};
use crate::env::{
    rollout, ActionMode, Env, EnvConfig, HeuristicPolicy, HybridAction, Policy, PolicyAction, StateVector,
    StepRecord, Transition, NUM_GEAR_COMMANDS, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::nn::{
    clip_grad_norm, critic_input, features_matrix, gaussian_log_prob, gaussian_log_prob_grad, kl_categorical,
    kl_gaussian, polyak, AdamState, CriticNet, PolicyBatch, PolicyHeadGrad, PolicyNet, CRITIC_INPUT_DIM,
    PROB_FLOOR,
};
use crate::routes::EpisodeConfig;

/// Gauss–Hermite nodes and weights (5 points) for `∫ e^{-x²} f(x) dx`.
const GH_NODES: [f64; 5] = [-2.020_182_870_456_085_6, -0.958_572_464_613_818_5, 0.0, 0.958_572_464_613_818_5, 2.020_182_870_456_085_6];
const GH_WEIGHTS: [f64; 5] = [0.019_953_242_059_045_91, 0.393_619_323_152_241_2, 0.945_308_720_482_941_9, 0.393_619_323_152_241_2, 0.019_953_242_059_045_91];
const MAX_MULTIPLIER: f64 = 1e6;
const DUAL_ITERATIONS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct MpoConfig {
    pub gamma: f64,
    pub retrace_steps: usize,
    /// Retrace trace-cutting coefficient λ.
    pub retrace_lambda: f64,
    /// E-step KL bounds ξ for the torque and gear components.
    pub xi_cont: f64,
    pub xi_disc: f64,
    /// M-step trust-region bounds.
    pub eps_mean: f64,
    pub eps_std: f64,
    pub eps_disc: f64,
    /// Weights on the forward-KL terms toward the group policy.
    pub lambda_cont: f64,
    pub lambda_disc: f64,
    /// Monitored bounds on the group-KL terms.
    pub eps_group_disc: f64,
    pub eps_group_mean: f64,
    pub batch_size: usize,
    pub n_batches: usize,
    /// Torque samples per state in the E-step.
    pub action_samples: usize,
    /// Polyak coefficient of the target critic.
    pub tau_critic: f64,
    /// Smoothing coefficient of the logged advantage estimate.
    pub tau_advantage: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Step size of the trust-region multipliers, relative to each bound.
    pub dual_lr: f64,
    pub initial_multiplier: f64,
    pub actor_steps_per_batch: usize,
    pub critic_steps_per_batch: usize,
    pub max_grad_norm: Option<f64>,
    pub buffer_capacity: usize,
    pub hidden_layers: Vec<usize>,
    /// Value of the absorbing state entered on a collision.
    pub terminal_value: f64,
}

impl MpoConfig {
    /// Values of the reference hyperparameter table.
    pub fn paper() -> Self {
        Self {
            gamma: 0.99,
            retrace_steps: 6,
            retrace_lambda: 1.0,
            xi_cont: 7e-2,
            xi_disc: 5e-2,
            eps_mean: 0.1,
            eps_std: 0.001,
            eps_disc: 0.1,
            lambda_cont: 0.8,
            lambda_disc: 0.6,
            eps_group_disc: 0.05,
            eps_group_mean: 0.05,
            batch_size: 3072,
            n_batches: 20,
            action_samples: 30,
            tau_critic: 0.01,
            tau_advantage: 0.95,
            actor_lr: 1e-4,
            critic_lr: 5e-4,
            dual_lr: 0.1,
            initial_multiplier: 1.0,
            actor_steps_per_batch: 1,
            critic_steps_per_batch: 1,
            max_grad_norm: Some(100.0),
            buffer_capacity: 300_000,
            hidden_layers: vec![256, 256, 256],
            terminal_value: -100.0,
        }
    }

    /// Workstation-sized variant of [`MpoConfig::paper`].
    pub fn desk() -> Self {
        Self {
            batch_size: 256,
            n_batches: 4,
            buffer_capacity: 50_000,
            hidden_layers: vec![64, 64, 64],
            actor_lr: 3e-5,
            critic_steps_per_batch: 10,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("retrace_lambda", self.retrace_lambda),
            ("xi_cont", self.xi_cont),
            ("xi_disc", self.xi_disc),
            ("eps_mean", self.eps_mean),
            ("eps_std", self.eps_std),
            ("eps_disc", self.eps_disc),
            ("eps_group_disc", self.eps_group_disc),
            ("eps_group_mean", self.eps_group_mean),
            ("tau_critic", self.tau_critic),
            ("tau_advantage", self.tau_advantage),
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("dual_lr", self.dual_lr),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.lambda_cont >= 0.0 && self.lambda_disc >= 0.0) {
            return Err(Error::invalid("group KL weights must be non-negative"));
        }
        if !(self.initial_multiplier >= 0.0) || !self.terminal_value.is_finite() {
            return Err(Error::invalid("multiplier and terminal value must be finite"));
        }
        let counts = [
            self.retrace_steps,
            self.batch_size,
            self.n_batches,
            self.action_samples,
            self.actor_steps_per_batch,
            self.critic_steps_per_batch,
            self.buffer_capacity,
        ];
        if counts.contains(&0) || self.hidden_layers.is_empty() || self.hidden_layers.contains(&0) {
            return Err(Error::invalid("counts and layer widths must be positive"));
        }
        Ok(())
    }

    pub fn sharing_enabled(&self) -> bool {
        self.lambda_cont > 0.0 || self.lambda_disc > 0.0
    }
}

/// FIFO ring of transitions in collection order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    data: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            data: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(t);
    }

    pub fn extend<'a>(&mut self, ts: impl IntoIterator<Item = &'a Transition>) {
        for t in ts {
            self.push(*t);
        }
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.data.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.data.iter()
    }

    /// Up to `len` consecutive transitions from `start`, stopping after an
    /// episode end or at the newest transition.
    pub fn window(&self, start: usize, len: usize) -> Vec<Transition> {
        let mut w = Vec::with_capacity(len);
        for t in self.data.range(start..).take(len) {
            w.push(*t);
            if t.ends_episode() {
                break;
            }
        }
        w
    }

    /// `n` states drawn uniformly (with replacement) from occupied slots.
    pub fn sample_states(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<StateVector>> {
        if self.data.len() < n || n == 0 {
            return Err(Error::Underfull {
                have: self.data.len(),
                need: n.max(1),
            });
        }
        Ok((0..n).map(|_| self.data[rng.random_range(0..self.data.len())].state).collect())
    }
}

/// Windows of sequential transitions drawn from one or more buffers. A single
/// index is drawn over the pooled size per window, so sampling from one
/// buffer consumes the generator exactly as sampling from the pool `[buffer]`.
pub fn sample_windows(
    buffers: &[&ReplayBuffer],
    batch_size: usize,
    window_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<Transition>>> {
    let total: usize = buffers.iter().map(|b| b.len()).sum();
    if total == 0 {
        return Err(Error::Underfull { have: 0, need: batch_size });
    }
    let n_windows = batch_size.div_ceil(window_len);
    let mut out = Vec::with_capacity(n_windows);
    for _ in 0..n_windows {
        let mut idx = rng.random_range(0..total);
        for b in buffers {
            if idx < b.len() {
                out.push(b.window(idx, window_len));
                break;
            }
            idx -= b.len();
        }
    }
    Ok(out)
}

/// Retrace targets for one window, by the backward recursion
/// `Q_ret(t) = r_t + γ[V_{t+1} + c_{t+1}(Q_ret(t+1) − Q(t+1))]`.
///
/// `v_next[t]` is the bootstrap value after step `t` (the terminal value for
/// a terminal step), `q_taken[t]` the target critic at the taken action and
/// `traces[t]` the truncated importance weight `c_t` (`traces[0]` unused).
pub fn retrace_window(rewards: &[f64], q_taken: &[f64], v_next: &[f64], traces: &[f64], gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut out = vec![0.0; n];
    for t in (0..n).rev() {
        out[t] = if t + 1 == n {
            rewards[t] + gamma * v_next[t]
        } else {
            rewards[t] + gamma * (v_next[t] + traces[t + 1] * (out[t + 1] - q_taken[t + 1]))
        };
    }
    out
}

/// `E_{u~N(μ,σ), g~π_d} Q(s, clamp(u), g)` for every state, by 5-point
/// Gauss–Hermite quadrature over torque and exact summation over gears.
pub fn expected_q(critic: &CriticNet, features: &Array2<f64>, pol: &PolicyBatch) -> Result<Vec<f64>> {
    let n = features.nrows();
    let per = GH_NODES.len() * NUM_GEAR_COMMANDS;
    let mut x = Array2::zeros((n * per, CRITIC_INPUT_DIM));
    for i in 0..n {
        let f: [f64; STATE_DIM] = std::array::from_fn(|j| features[[i, j]]);
        let sigma = pol.sigma(i);
        for (k, node) in GH_NODES.iter().enumerate() {
            let u = (pol.mu[i] + std::f64::consts::SQRT_2 * sigma * node).clamp(-1.0, 1.0);
            for g in 0..NUM_GEAR_COMMANDS {
                let row = critic_input(&f, u, g);
                let r = i * per + k * NUM_GEAR_COMMANDS + g;
                for (c, v) in row.iter().enumerate() {
                    x[[r, c]] = *v;
                }
            }
        }
    }
    let q = critic.q(x.view())?;
    let norm = std::f64::consts::PI.sqrt();
    Ok((0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (k, w) in GH_WEIGHTS.iter().enumerate() {
                for g in 0..NUM_GEAR_COMMANDS {
                    acc += w / norm * pol.probs[i][g] * q[i * per + k * NUM_GEAR_COMMANDS + g];
                }
            }
            acc
        })
        .collect())
}

fn taken_inputs(ts: &[&Transition], max_torque: f64) -> Array2<f64> {
    let mut x = Array2::zeros((ts.len(), CRITIC_INPUT_DIM));
    for (i, t) in ts.iter().enumerate() {
        let row = critic_input(
            &t.state.features(),
            (t.action.torque_nm / max_torque).clamp(-1.0, 1.0),
            t.action.gear_index(),
        );
        for (c, v) in row.iter().enumerate() {
            x[[i, c]] = *v;
        }
    }
    x
}

/// Retrace targets for a batch of windows, bootstrapped from `target`.
pub fn retrace_targets(
    windows: &[Vec<Transition>],
    target: &CriticNet,
    actor: &PolicyNet,
    cfg: &MpoConfig,
) -> Result<Vec<Vec<f64>>> {
    let flat: Vec<&Transition> = windows.iter().flatten().collect();
    if flat.is_empty() {
        return Ok(vec![Vec::new(); windows.len()]);
    }
    if flat
        .iter()
        .any(|t| !(t.behavior_log_prob_cont.is_finite() && t.behavior_log_prob_disc.is_finite()))
    {
        return Err(Error::invalid("transition lacks finite behavior log-probabilities"));
    }
    let states: Vec<StateVector> = flat.iter().map(|t| t.state).collect();
    let next: Vec<StateVector> = flat.iter().map(|t| t.next_state).collect();
    let pol_now = actor.evaluate_states(&states)?;
    let next_feats = features_matrix(&next);
    let pol_next = actor.evaluate(next_feats.view())?;
    let v_next = expected_q(target, &next_feats, &pol_next)?;
    let q_taken = target.q(taken_inputs(&flat, actor.max_torque_nm).view())?;
    let mut out = Vec::with_capacity(windows.len());
    let mut base = 0;
    for w in windows {
        let n = w.len();
        let mut rewards = Vec::with_capacity(n);
        let mut qs = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        let mut cs = Vec::with_capacity(n);
        for (k, t) in w.iter().enumerate() {
            let i = base + k;
            let u = (t.action.torque_nm / actor.max_torque_nm).clamp(-1.0, 1.0);
            let log_pi = gaussian_log_prob(u, pol_now.mu[i], pol_now.log_std[i])
                + pol_now.probs[i][t.action.gear_index()].max(PROB_FLOOR).ln();
            let log_b = t.behavior_log_prob_cont + t.behavior_log_prob_disc;
            cs.push(cfg.retrace_lambda * (log_pi - log_b).exp().min(1.0));
            rewards.push(t.reward);
            qs.push(q_taken[i]);
            vs.push(if t.done { cfg.terminal_value } else { v_next[i] });
        }
        out.push(retrace_window(&rewards, &qs, &vs, &cs, cfg.gamma));
        base += n;
    }
    Ok(out)
}

/// Per-state KL of the reweighted distribution `q ∝ base·exp(Q/η)` from
/// `base`, averaged over states, and the weights themselves.
fn tempered(q: &Array2<f64>, log_base: &Array2<f64>, eta: f64) -> (f64, Array2<f64>) {
    let mut w = Array2::zeros(q.raw_dim());
    let mut kl = 0.0;
    for i in 0..q.nrows() {
        let logits: Vec<f64> = (0..q.ncols()).map(|a| log_base[[i, a]] + q[[i, a]] / eta).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        for a in 0..q.ncols() {
            let lw = logits[a] - lse;
            let p = lw.exp();
            w[[i, a]] = p;
            if p > 0.0 {
                kl += p * (lw - log_base[[i, a]]);
            }
        }
    }
    ((kl / q.nrows() as f64).max(0.0), w)
}

/// MPO dual `g(η) = ηξ + η·mean_s log Σ_a base(a|s) exp(Q(s,a)/η)`.
pub fn temperature_dual(q: &Array2<f64>, log_base: &Array2<f64>, eta: f64, xi: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..q.nrows() {
        let logits: Vec<f64> = (0..q.ncols()).map(|a| log_base[[i, a]] + q[[i, a]] / eta).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        acc += m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    }
    eta * xi + eta * acc / q.nrows() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EStepWeights {
    /// Normalized weights per state (rows) over candidate actions (columns).
    pub weights: Array2<f64>,
    pub eta: f64,
    /// Mean KL of the weights from the sampling distribution.
    pub kl: f64,
    pub converged: bool,
}

/// Nonparametric E-step: weights `q ∝ base·exp(Q/η)` with η minimizing the
/// dual, found by bisection in `log η` on its stationarity condition
/// `mean KL(q_η ‖ base) = ξ`.
pub fn e_step_weights(q: &Array2<f64>, log_base: &Array2<f64>, xi: f64) -> Result<EStepWeights> {
    if q.raw_dim() != log_base.raw_dim() || q.nrows() == 0 || q.ncols() == 0 {
        return Err(Error::Shape {
            context: "e-step values",
            expected: format!("{:?}", log_base.shape()),
            got: format!("{:?}", q.shape()),
        });
    }
    if q.iter().chain(log_base.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("e-step values"));
    }
    let spread = q
        .rows()
        .into_iter()
        .map(|r| {
            let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .fold(0.0, f64::max);
    if spread == 0.0 {
        let (kl, weights) = tempered(q, log_base, 1.0);
        return Ok(EStepWeights {
            weights,
            eta: f64::INFINITY,
            kl,
            converged: true,
        });
    }
    let (mut lo, mut hi) = ((spread * 1e-6).ln(), (spread * 1e6).ln());
    let (kl_lo, w_lo) = tempered(q, log_base, lo.exp());
    if kl_lo <= xi {
        return Ok(EStepWeights {
            weights: w_lo,
            eta: lo.exp(),
            kl: kl_lo,
            converged: true,
        });
    }
    let mut converged = false;
    for _ in 0..DUAL_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        let (kl, _) = tempered(q, log_base, mid.exp());
        if kl > xi {
            lo = mid;
        } else {
            hi = mid;
        }
        if (kl - xi).abs() <= 1e-9 * xi || hi - lo < 1e-13 {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("temperature dual did not converge; using the bracketed upper value");
    }
    let (kl, weights) = tempered(q, log_base, hi.exp());
    Ok(EStepWeights {
        weights,
        eta: hi.exp(),
        kl,
        converged,
    })
}

/// Lagrange multipliers of the M-step trust regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Multipliers {
    pub mean: f64,
    pub std: f64,
    pub disc: f64,
}

impl Multipliers {
    pub fn splat(v: f64) -> Self {
        Self { mean: v, std: v, disc: v }
    }
}

/// Group-policy distributions and stop-gradient cross-weights per state.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTerms {
    pub group: PolicyBatch,
    /// Group probability of the batch gear command (weights the torque KL).
    pub w_disc: Vec<f64>,
    /// Relative group density of the batch torque, in (0, 1] (weights the gear KL).
    pub w_cont: Vec<f64>,
}

/// Everything the M-step loss needs, frozen before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct MStepBatch {
    pub features: Array2<f64>,
    /// `n × M` sampled normalized torques (unclamped).
    pub samples: Array2<f64>,
    pub q_cont: Array2<f64>,
    /// `n × 3` gear-command weights.
    pub q_disc: Array2<f64>,
    /// Trust-region reference distribution.
    pub reference: PolicyBatch,
    pub group: Option<GroupTerms>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MStepLoss {
    pub total: f64,
    pub nll_cont: f64,
    pub nll_disc: f64,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub kl_disc: f64,
    pub group_kl_cont: f64,
    pub group_kl_disc: f64,
}

/// Decoupled weighted-MLE M-step loss with Lagrangian trust-region penalties
/// and, when present, the cross-weighted forward-KL terms toward the group:
/// `λ_c·π_g^d(a^d)·KL(π_g^c‖π^c) + λ_d·ρ_g^c(a^c)·KL(π_g^d‖π^d)`.
/// Returns the loss and its gradient with respect to the actor parameters.
pub fn m_step_loss(
    actor: &PolicyNet,
    batch: &MStepBatch,
    alpha: &Multipliers,
    lambda_cont: f64,
    lambda_disc: f64,
) -> Result<(MStepLoss, Vec<f64>)> {
    let n = batch.features.nrows();
    let m = batch.samples.ncols();
    let (pol, cache) = actor.evaluate_cached(batch.features.view())?;
    let mut g = PolicyHeadGrad::zeros(n);
    let mut loss = MStepLoss::default();
    let inv_n = 1.0 / n as f64;
    let reference = &batch.reference;
    for i in 0..n {
        let (mu, ls) = (pol.mu[i], pol.log_std[i]);
        let (mu_r, ls_r) = (reference.mu[i], reference.log_std[i]);
        let (sig, sig_r) = (ls.exp(), ls_r.exp());
        for j in 0..m {
            let w = batch.q_cont[[i, j]];
            if w == 0.0 {
                continue;
            }
            let u = batch.samples[[i, j]];
            loss.nll_cont -= inv_n * w * (gaussian_log_prob(u, mu, ls_r) + gaussian_log_prob(u, mu_r, ls));
            let (d_mu, _) = gaussian_log_prob_grad(u, mu, ls_r);
            let (_, d_ls) = gaussian_log_prob_grad(u, mu_r, ls);
            g.d_mu[i] -= inv_n * w * d_mu;
            g.d_log_std[i] -= inv_n * w * d_ls;
        }
        let probs = &pol.probs[i];
        let qd: [f64; NUM_GEAR_COMMANDS] = std::array::from_fn(|k| batch.q_disc[[i, k]]);
        let qsum: f64 = qd.iter().sum();
        for k in 0..NUM_GEAR_COMMANDS {
            loss.nll_disc -= inv_n * qd[k] * probs[k].max(PROB_FLOOR).ln();
            g.d_logits[i][k] += inv_n * (qsum * probs[k] - qd[k]);
        }

        let kl_mu = kl_gaussian(mu_r, sig_r, mu, sig_r);
        let kl_sd = kl_gaussian(mu_r, sig_r, mu_r, sig);
        let kl_d = kl_categorical(&reference.probs[i], probs)?;
        loss.kl_mean += inv_n * kl_mu;
        loss.kl_std += inv_n * kl_sd;
        loss.kl_disc += inv_n * kl_d;
        g.d_mu[i] += inv_n * alpha.mean * (mu - mu_r) / (sig_r * sig_r);
        g.d_log_std[i] += inv_n * alpha.std * (1.0 - (sig_r * sig_r) / (sig * sig));
        for k in 0..NUM_GEAR_COMMANDS {
            g.d_logits[i][k] += inv_n * alpha.disc * (probs[k] - reference.probs[i][k]);
        }

        if let Some(gt) = &batch.group {
            let (mu_g, sig_g) = (gt.group.mu[i], gt.group.sigma(i));
            let kl_c = kl_gaussian(mu_g, sig_g, mu, sig);
            let kl_dg = kl_categorical(&gt.group.probs[i], probs)?;
            loss.group_kl_cont += inv_n * kl_c;
            loss.group_kl_disc += inv_n * kl_dg;
            let wc = lambda_cont * gt.w_disc[i];
            let wd = lambda_disc * gt.w_cont[i];
            loss.total += inv_n * (wc * kl_c + wd * kl_dg);
            g.d_mu[i] += inv_n * wc * (mu - mu_g) / (sig * sig);
            g.d_log_std[i] += inv_n * wc * (1.0 - (sig_g * sig_g + (mu_g - mu).powi(2)) / (sig * sig));
            for k in 0..NUM_GEAR_COMMANDS {
                g.d_logits[i][k] += inv_n * wd * (probs[k] - gt.group.probs[i][k]);
            }
        }
    }
    loss.total += loss.nll_cont + loss.nll_disc + alpha.mean * loss.kl_mean + alpha.std * loss.kl_std + alpha.disc * loss.kl_disc;
    let grads = actor.backward(&cache, &pol, &g)?;
    Ok((loss, grads))
}

/// Diagnostics of one learn cycle, averaged over its batches.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LearnStats {
    pub batches: usize,
    pub skipped: bool,
    pub critic_loss: f64,
    pub eta_cont: f64,
    pub eta_disc: f64,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub kl_disc: f64,
    pub group_kl_cont: f64,
    pub group_kl_disc: f64,
    pub dual_fallbacks: usize,
    /// Batches whose group-KL terms exceeded their monitored bounds.
    pub group_bound_violations: usize,
    pub smoothed_advantage: f64,
}

/// Actor, critic, target critic and their optimizer state: everything that
/// learns, without the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub config: MpoConfig,
    pub actor: PolicyNet,
    pub critic: CriticNet,
    pub target_critic: CriticNet,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub multipliers: Multipliers,
    pub rng: ChaCha8Rng,
    pub smoothed_advantage: f64,
    pub cycles: u64,
}

impl Learner {
    pub fn new(config: MpoConfig, actor: PolicyNet, critic: CriticNet, seed: u64) -> Result<Self> {
        config.validate()?;
        if actor.hidden_layers() != config.hidden_layers.as_slice() {
            return Err(Error::Architecture(format!(
                "actor hidden layers {:?} differ from configured {:?}",
                actor.hidden_layers(),
                config.hidden_layers
            )));
        }
        let actor_opt = AdamState::new(actor.mlp.params().len(), config.actor_lr);
        let critic_opt = AdamState::new(critic.mlp.params().len(), config.critic_lr);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            multipliers: Multipliers::splat(config.initial_multiplier),
            target_critic: critic.clone(),
            config,
            actor,
            critic,
            actor_opt,
            critic_opt,
            rng,
            smoothed_advantage: 0.0,
            cycles: 0,
        })
    }

    /// Adam step on the squared retrace error, then Polyak mixing of the
    /// target. Returns the loss before the step.
    pub fn critic_update(&mut self, windows: &[Vec<Transition>]) -> Result<f64> {
        let targets = retrace_targets(windows, &self.target_critic, &self.actor, &self.config)?;
        let flat: Vec<&Transition> = windows.iter().flatten().collect();
        let y: Vec<f64> = targets.into_iter().flatten().collect();
        if flat.is_empty() {
            return Ok(0.0);
        }
        let x = taken_inputs(&flat, self.actor.max_torque_nm);
        let mut first_loss = None;
        for _ in 0..self.config.critic_steps_per_batch {
            let (q, cache) = self.critic.q_cached(x.view())?;
            let n = y.len() as f64;
            let loss = q.iter().zip(&y).map(|(a, b)| 0.5 * (a - b).powi(2)).sum::<f64>() / n;
            if !loss.is_finite() {
                return Err(Error::Diverged("critic loss is not finite".into()));
            }
            first_loss.get_or_insert(loss);
            let dq: Vec<f64> = q.iter().zip(&y).map(|(a, b)| (a - b) / n).collect();
            let mut grads = self.critic.backward(&cache, &dq)?;
            if let Some(c) = self.config.max_grad_norm {
                clip_grad_norm(&mut grads, c);
            }
            self.critic_opt.step(self.critic.mlp.params_mut(), &grads)?;
            polyak(self.target_critic.mlp.params_mut(), self.critic.mlp.params(), self.config.tau_critic);
        }
        Ok(first_loss.unwrap_or(0.0))
    }

    /// Builds the E-step weights for `states` by sampling torques from
    /// `reference` and scoring them with the online critic.
    pub fn e_step(&mut self, states: &[StateVector], reference: &PolicyNet) -> Result<(MStepBatch, EStepWeights, EStepWeights)> {
        let n = states.len();
        let m = self.config.action_samples;
        let features = features_matrix(states);
        let ref_batch = reference.evaluate(features.view())?;
        let mut samples = Array2::zeros((n, m));
        for i in 0..n {
            let sigma = ref_batch.sigma(i);
            for j in 0..m {
                let z: f64 = self.rng.sample(StandardNormal);
                samples[[i, j]] = ref_batch.mu[i] + sigma * z;
            }
        }
        let mut x = Array2::zeros((n * m * NUM_GEAR_COMMANDS, CRITIC_INPUT_DIM));
        for i in 0..n {
            let f: [f64; STATE_DIM] = std::array::from_fn(|c| features[[i, c]]);
            for j in 0..m {
                let u = samples[[i, j]].clamp(-1.0, 1.0);
                for g in 0..NUM_GEAR_COMMANDS {
                    let row = critic_input(&f, u, g);
                    let r = (i * m + j) * NUM_GEAR_COMMANDS + g;
                    for (c, v) in row.iter().enumerate() {
                        x[[r, c]] = *v;
                    }
                }
            }
        }
        let q = self.critic.q(x.view())?;
        let mut q_cont = Array2::zeros((n, m));
        let mut q_disc = Array2::zeros((n, NUM_GEAR_COMMANDS));
        let mut log_disc = Array2::zeros((n, NUM_GEAR_COMMANDS));
        for i in 0..n {
            for j in 0..m {
                for g in 0..NUM_GEAR_COMMANDS {
                    let v = q[(i * m + j) * NUM_GEAR_COMMANDS + g];
                    q_cont[[i, j]] += ref_batch.probs[i][g] * v;
                    q_disc[[i, g]] += v / m as f64;
                }
            }
            for g in 0..NUM_GEAR_COMMANDS {
                log_disc[[i, g]] = ref_batch.probs[i][g].max(PROB_FLOOR).ln();
            }
        }
        let log_uniform = Array2::from_elem((n, m), -(m as f64).ln());
        let wc = e_step_weights(&q_cont, &log_uniform, self.config.xi_cont)?;
        let wd = e_step_weights(&q_disc, &log_disc, self.config.xi_disc)?;
        let improved: f64 = (0..n)
            .map(|i| {
                let baseline: f64 = q_cont.row(i).sum() / m as f64;
                let tilted: f64 = (0..m).map(|j| wc.weights[[i, j]] * q_cont[[i, j]]).sum();
                tilted - baseline
            })
            .sum::<f64>()
            / n as f64;
        let tau = self.config.tau_advantage;
        self.smoothed_advantage = tau * self.smoothed_advantage + (1.0 - tau) * improved;
        let batch = MStepBatch {
            features,
            samples,
            q_cont: wc.weights.clone(),
            q_disc: wd.weights.clone(),
            reference: ref_batch,
            group: None,
        };
        Ok((batch, wc, wd))
    }

    /// Attaches group-KL terms for the batch transitions' actions.
    pub fn group_terms(&self, group: &PolicyNet, batch: &MStepBatch, actions: &[HybridAction]) -> Result<GroupTerms> {
        let gb = group.evaluate(batch.features.view())?;
        let mut w_disc = Vec::with_capacity(actions.len());
        let mut w_cont = Vec::with_capacity(actions.len());
        for (i, a) in actions.iter().enumerate() {
            w_disc.push(gb.probs[i][a.gear_index()]);
            let u = (a.torque_nm / self.actor.max_torque_nm).clamp(-1.0, 1.0);
            let z = (u - gb.mu[i]) / gb.sigma(i);
            w_cont.push((-0.5 * z * z).exp());
        }
        Ok(GroupTerms {
            group: gb,
            w_disc,
            w_cont,
        })
    }

    /// Adam step(s) on [`m_step_loss`], then projected dual ascent on the
    /// trust-region multipliers using the post-update KLs.
    pub fn m_step(&mut self, batch: &MStepBatch) -> Result<MStepLoss> {
        let (lc, ld) = if batch.group.is_some() {
            (self.config.lambda_cont, self.config.lambda_disc)
        } else {
            (0.0, 0.0)
        };
        let mut first = None;
        for _ in 0..self.config.actor_steps_per_batch {
            let (loss, mut grads) = m_step_loss(&self.actor, batch, &self.multipliers, lc, ld)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged("M-step loss is not finite".into()));
            }
            first.get_or_insert(loss);
            if let Some(c) = self.config.max_grad_norm {
                clip_grad_norm(&mut grads, c);
            }
            self.actor_opt.step(self.actor.mlp.params_mut(), &grads)?;
        }
        let (after, _) = m_step_loss(&self.actor, batch, &self.multipliers, lc, ld)?;
        let c = &self.config;
        let step = |a: f64, kl: f64, eps: f64| (a + c.dual_lr * (kl - eps) / eps).max(0.0);
        self.multipliers = Multipliers {
            mean: step(self.multipliers.mean, after.kl_mean, c.eps_mean),
            std: step(self.multipliers.std, after.kl_std, c.eps_std),
            disc: step(self.multipliers.disc, after.kl_disc, c.eps_disc),
        };
        let mm = self.multipliers;
        if [mm.mean, mm.std, mm.disc].iter().any(|a| !a.is_finite() || *a > MAX_MULTIPLIER) {
            return Err(Error::Diverged(format!("trust-region multipliers diverged: {mm:?}")));
        }
        Ok(MStepLoss {
            kl_mean: after.kl_mean,
            kl_std: after.kl_std,
            kl_disc: after.kl_disc,
            group_kl_cont: after.group_kl_cont,
            group_kl_disc: after.group_kl_disc,
            ..first.unwrap_or_default()
        })
    }

    /// `n_batches` rounds of critic update, E-step and M-step on windows
    /// drawn from `buffers`. The trust-region reference is the actor as it
    /// stood at the start of the cycle.
    pub fn learn_cycle(&mut self, buffers: &[&ReplayBuffer], group: Option<&PolicyNet>) -> Result<LearnStats> {
        let have: usize = buffers.iter().map(|b| b.len()).sum();
        if have < self.config.batch_size {
            log::warn!("learn cycle skipped: {have} transitions buffered, batch needs {}", self.config.batch_size);
            return Ok(LearnStats {
                skipped: true,
                ..Default::default()
            });
        }
        let group = group.filter(|_| self.config.sharing_enabled());
        let reference = self.actor.clone();
        let mut s = LearnStats::default();
        for _ in 0..self.config.n_batches {
            let windows = sample_windows(buffers, self.config.batch_size, self.config.retrace_steps, &mut self.rng)?;
            s.critic_loss += self.critic_update(&windows)?;
            let flat: Vec<&Transition> = windows.iter().flatten().collect();
            let states: Vec<StateVector> = flat.iter().map(|t| t.state).collect();
            let actions: Vec<HybridAction> = flat.iter().map(|t| t.action).collect();
            let (mut batch, wc, wd) = self.e_step(&states, &reference)?;
            if let Some(gp) = group {
                batch.group = Some(self.group_terms(gp, &batch, &actions)?);
            }
            let loss = self.m_step(&batch)?;
            s.batches += 1;
            s.eta_cont += wc.eta;
            s.eta_disc += wd.eta;
            s.dual_fallbacks += usize::from(!wc.converged) + usize::from(!wd.converged);
            s.kl_mean += loss.kl_mean;
            s.kl_std += loss.kl_std;
            s.kl_disc += loss.kl_disc;
            s.group_kl_cont += loss.group_kl_cont;
            s.group_kl_disc += loss.group_kl_disc;
            if group.is_some()
                && (loss.group_kl_disc > self.config.eps_group_disc || loss.group_kl_cont > self.config.eps_group_mean)
            {
                s.group_bound_violations += 1;
            }
        }
        let k = s.batches as f64;
        for v in [
            &mut s.critic_loss,
            &mut s.eta_cont,
            &mut s.eta_disc,
            &mut s.kl_mean,
            &mut s.kl_std,
            &mut s.kl_disc,
            &mut s.group_kl_cont,
            &mut s.group_kl_disc,
        ] {
            *v /= k;
        }
        s.smoothed_advantage = self.smoothed_advantage;
        self.cycles += 1;
        Ok(s)
    }

    /// Adopts another learner's networks (parameters only; optimizer state,
    /// multipliers and generators stay local).
    pub fn adopt_networks(&mut self, other: &Learner) {
        self.actor = other.actor.clone();
        self.critic = other.critic.clone();
        self.target_critic = other.target_critic.clone();
    }
}

/// One vehicle's learner together with its replay buffer and acting state.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub id: usize,
    pub learner: Learner,
    pub buffer: ReplayBuffer,
    pub act_rng: ChaCha8Rng,
    pub snapshot_rng: ChaCha8Rng,
    /// Group policy this agent currently regularizes toward.
    pub group: Option<GroupPolicy>,
}

impl Agent {
    /// Agent `id` starting from a shared checkpoint. Its three generator
    /// streams (acting, learning, snapshots) derive from `seed`.
    pub fn new(id: usize, config: MpoConfig, actor: PolicyNet, critic: CriticNet, seed: u64) -> Result<Self> {
        let buffer = ReplayBuffer::new(config.buffer_capacity);
        let learner = Learner::new(config, actor, critic, seed)?;
        let mut act_rng = ChaCha8Rng::seed_from_u64(seed);
        act_rng.set_stream(0);
        let mut snapshot_rng = ChaCha8Rng::seed_from_u64(seed);
        snapshot_rng.set_stream(2);
        Ok(Self {
            id,
            learner,
            buffer,
            act_rng,
            snapshot_rng,
            group: None,
        })
    }

    pub fn config(&self) -> &MpoConfig {
        &self.learner.config
    }

    pub fn actor(&self) -> &PolicyNet {
        &self.learner.actor
    }

    /// Steps `env` for up to `max_steps` with sampled actions from the
    /// current actor and stores the transitions.
    pub fn collect(&mut self, env: &mut Env, max_steps: usize) -> Result<Vec<StepRecord>> {
        let steps = rollout(&self.learner.actor, env, max_steps, ActionMode::Sample, &mut self.act_rng)?;
        self.buffer.extend(steps.iter().map(|s| &s.transition));
        Ok(steps)
    }

    /// A learn cycle on the agent's own buffer, regularized toward its
    /// adopted group policy when it has one.
    pub fn learn_cycle(&mut self) -> Result<LearnStats> {
        let group = self.group.as_ref().map(|g| &g.policy);
        self.learner.learn_cycle(&[&self.buffer], group)
    }

    /// Adopts `g` unless the agent already holds the same or a newer version.
    pub fn adopt_group(&mut self, g: GroupPolicy) -> bool {
        if self.group_version().is_some_and(|v| v >= g.version) {
            return false;
        }
        self.group = Some(g);
        true
    }

    pub fn group_version(&self) -> Option<u64> {
        self.group.as_ref().map(|g| g.version)
    }

    /// Copies of the actor and critic with `b` uniformly drawn buffer states.
    pub fn make_snapshot(&mut self, b: usize, cycle_index: u64) -> Result<AgentSnapshot> {
        let states = self.buffer.sample_states(b, &mut self.snapshot_rng)?;
        Ok(AgentSnapshot {
            agent_id: self.id as u32,
            cycle_index,
            actor: self.learner.actor.clone(),
            critic: self.learner.critic.clone(),
            states,
        })
    }
}

/// Heuristic controller with Gaussian torque noise, for diverse warm-up data.
struct NoisyHeuristic {
    inner: HeuristicPolicy,
    torque_sigma: f64,
}

impl Policy for NoisyHeuristic {
    fn act(&self, state: &StateVector, _mode: ActionMode, rng: &mut ChaCha8Rng) -> Result<PolicyAction> {
        let mut a = self.inner.action(state)?;
        let max = self.inner.vehicle.params.max_traction_torque_nm;
        let z: f64 = rng.sample(StandardNormal);
        a.torque_nm = (a.torque_nm + self.torque_sigma * max * z).clamp(-max, max);
        if rng.random::<f64>() < 0.05 {
            a.gear_cmd = rng.random_range(-1i8..=1);
        }
        Ok(PolicyAction {
            action: a,
            log_prob_cont: 0.0,
            log_prob_disc: 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitOptions {
    pub actor_steps: usize,
    pub critic_steps: usize,
    pub minibatch: usize,
    pub lr: f64,
    /// Exploration noise of the initial torque head, in normalized units.
    pub initial_sigma: f64,
    /// Shift points and torque gain of the cloned heuristic.
    pub teacher_upshift_rpm: f64,
    pub teacher_downshift_rpm: f64,
    pub teacher_torque_gain: f64,
}

impl InitOptions {
    /// Later shift points, leaving the desk-scale learner more room to improve.
    pub fn desk() -> Self {
        Self {
            teacher_upshift_rpm: 2100.0,
            teacher_downshift_rpm: 1500.0,
            ..Self::default()
        }
    }
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            actor_steps: 1500,
            critic_steps: 300,
            minibatch: 256,
            lr: 1e-3,
            initial_sigma: 0.1,
            teacher_upshift_rpm: 1500.0,
            teacher_downshift_rpm: 950.0,
            teacher_torque_gain: 1.0,
        }
    }
}

/// The shared starting checkpoint: an actor cloned from the heuristic
/// controller and a critic warm-started by retrace policy evaluation on data
/// that actor collects. Deterministic in `seed`.
pub fn initial_checkpoint(
    cfg: &MpoConfig,
    env_cfg: &EnvConfig,
    episodes: &[EpisodeConfig],
    opts: &InitOptions,
    seed: u64,
) -> Result<(PolicyNet, CriticNet)> {
    if episodes.is_empty() {
        return Err(Error::invalid("initial checkpoint needs at least one warm-up episode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_torque = env_cfg.max_torque_nm();
    let rpm = std::f64::consts::PI / 30.0;
    let heuristic = HeuristicPolicy {
        upshift_rad_s: opts.teacher_upshift_rpm * rpm,
        downshift_rad_s: opts.teacher_downshift_rpm * rpm,
        torque_gain: opts.teacher_torque_gain,
        ..HeuristicPolicy::new(env_cfg.vehicle.clone())
    };
    let noisy = NoisyHeuristic {
        inner: heuristic.clone(),
        torque_sigma: 0.05,
    };
    let mut states = Vec::new();
    for ep in episodes {
        let mut env = Env::new(env_cfg, ep)?;
        let n = env.remaining_steps();
        let steps = rollout(&noisy, &mut env, n, ActionMode::Sample, &mut rng)?;
        states.extend(steps.iter().map(|s| s.transition.state));
    }
    let targets: Vec<HybridAction> = states.iter().map(|s| heuristic.action(s)).collect::<Result<_>>()?;
    // Shifts are rare; balance the gear classes so argmax still shifts.
    let mut counts = [0usize; NUM_GEAR_COMMANDS];
    for a in &targets {
        counts[a.gear_index()] += 1;
    }
    let class_weight: [f64; NUM_GEAR_COMMANDS] =
        std::array::from_fn(|k| targets.len() as f64 / (NUM_GEAR_COMMANDS * counts[k].max(1)) as f64);

    let mut actor = PolicyNet::new(&cfg.hidden_layers, max_torque, &mut rng)?;
    let mut opt = AdamState::new(actor.mlp.params().len(), opts.lr);
    let target_log_std = opts.initial_sigma.ln();
    for _ in 0..opts.actor_steps {
        let idx: Vec<usize> = (0..opts.minibatch.min(states.len())).map(|_| rng.random_range(0..states.len())).collect();
        let batch_states: Vec<StateVector> = idx.iter().map(|i| states[*i]).collect();
        let (pol, cache) = actor.evaluate_cached(features_matrix(&batch_states).view())?;
        let n = idx.len() as f64;
        let mut g = PolicyHeadGrad::zeros(idx.len());
        for (r, i) in idx.iter().enumerate() {
            let u_star = (targets[*i].torque_nm / max_torque).clamp(-1.0, 1.0);
            g.d_mu[r] = (pol.mu[r] - u_star) / n * 100.0;
            g.d_log_std[r] = (pol.log_std[r] - target_log_std) / n;
            let k_star = targets[*i].gear_index();
            let mut teacher = [0.0; NUM_GEAR_COMMANDS];
            teacher[k_star] = 1.0;
            for k in 0..NUM_GEAR_COMMANDS {
                g.d_logits[r][k] = class_weight[k_star] * (pol.probs[r][k] - teacher[k]) / n;
            }
        }
        let grads = actor.backward(&cache, &pol, &g)?;
        opt.step(actor.mlp.params_mut(), &grads)?;
    }

    let critic = CriticNet::new(&cfg.hidden_layers, 1.0 / (1.0 - cfg.gamma), &mut rng)?;
    let mut learner = Learner::new(cfg.clone(), actor.clone(), critic, seed)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity.max(1));
    for ep in episodes {
        let mut env = Env::new(env_cfg, ep)?;
        let n = env.remaining_steps();
        let steps = rollout(&actor, &mut env, n, ActionMode::Sample, &mut rng)?;
        buffer.extend(steps.iter().map(|s| &s.transition));
    }
    for _ in 0..opts.critic_steps {
        let windows = sample_windows(&[&buffer], cfg.batch_size, cfg.retrace_steps, &mut rng)?;
        learner.critic_update(&windows)?;
    }
    let mut critic = learner.critic;
    critic.value_scale = 1.0 / (1.0 - cfg.gamma);
    Ok((actor, critic))
}
