//! Fleet coordinator: advantage-weighted distillation of agent policies into
//! a group policy, and the centralized learner used by the IMPALA baselines.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{LearnStats, Learner, ReplayBuffer};
use crate::env::{StateVector, NUM_GEAR_COMMANDS, STATE_DIM};
use crate::error::{Error, Result};
use crate::nn::{
    critic_input, features_matrix, xent_categorical, xent_gaussian, xent_gaussian_grad, AdamState, CriticNet,
    PolicyBatch, PolicyHeadGrad, PolicyNet, CRITIC_INPUT_DIM,
};

/// Bound on |A/β| before exponentiation.
pub const ZETA_LOG_CLAMP: f64 = 10.0;

/// What an agent ships each round: its networks and a batch of its states.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSnapshot {
    pub agent_id: u32,
    pub cycle_index: u64,
    pub actor: PolicyNet,
    pub critic: CriticNet,
    pub states: Vec<StateVector>,
}

impl AgentSnapshot {
    pub fn validate(&self) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::invalid("snapshot carries no states"));
        }
        for s in &self.states {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupPolicy {
    pub policy: PolicyNet,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatorConfig {
    /// Advantage temperature β.
    pub beta: f64,
    pub lr: f64,
    pub iterations: usize,
    /// States drawn from each snapshot per regression iteration.
    pub minibatch_per_agent: usize,
    /// Uniform action samples per state in the value estimate.
    pub value_samples: usize,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            beta: 0.8,
            lr: 5e-4,
            iterations: 300,
            minibatch_per_agent: 256,
            value_samples: 30,
        }
    }
}

impl CoordinatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0 && self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("beta and group learning rate must be positive"));
        }
        if self.minibatch_per_agent == 0 || self.value_samples == 0 {
            return Err(Error::invalid("minibatch and value samples must be positive"));
        }
        Ok(())
    }
}

/// `exp(A/β)` with the exponent clamped to ±10.
pub fn zeta_from_advantage(advantage: f64, beta: f64) -> f64 {
    (advantage / beta).clamp(-ZETA_LOG_CLAMP, ZETA_LOG_CLAMP).exp()
}

/// `V(s) ≈ (1/M) Σ_j Q(s, a_j)` with `a_j` uniform over the hybrid action
/// box (normalized torque in [-1, 1], gear command uniform over three),
/// for every state.
pub fn estimate_value(critic: &CriticNet, states: &[StateVector], m: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::invalid("value estimate needs at least one sample"));
    }
    let mut x = Array2::zeros((states.len() * m, CRITIC_INPUT_DIM));
    for (i, s) in states.iter().enumerate() {
        let f = s.features();
        for j in 0..m {
            let u = rng.random_range(-1.0..=1.0);
            let g = rng.random_range(0..NUM_GEAR_COMMANDS);
            for (c, v) in critic_input(&f, u, g).iter().enumerate() {
                x[[i * m + j, c]] = *v;
            }
        }
    }
    let q = critic.q(x.view())?;
    Ok((0..states.len()).map(|i| q.slice(ndarray::s![i * m..(i + 1) * m]).sum() / m as f64).collect())
}

/// ζ for every state: exponentiated advantage of the actor's greedy action
/// (mean torque, most probable gear) over the value estimate `v`.
pub fn advantage_weight(critic: &CriticNet, actor: &PolicyNet, states: &[StateVector], v: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) {
        return Err(Error::invalid("beta must be positive"));
    }
    if v.len() != states.len() {
        return Err(Error::Shape {
            context: "value estimates",
            expected: states.len().to_string(),
            got: v.len().to_string(),
        });
    }
    let feats = features_matrix(states);
    let pol = actor.evaluate(feats.view())?;
    let mut x = Array2::zeros((states.len(), CRITIC_INPUT_DIM));
    for i in 0..states.len() {
        let f: [f64; STATE_DIM] = std::array::from_fn(|c| feats[[i, c]]);
        let row = critic_input(&f, pol.mu[i].clamp(-1.0, 1.0), pol.argmax_gear(i));
        for (c, val) in row.iter().enumerate() {
            x[[i, c]] = *val;
        }
    }
    let q = critic.q(x.view())?;
    Ok(q.iter().zip(v).map(|(q, v)| zeta_from_advantage(q - v, beta)).collect())
}

/// Wall-clock seconds spent in each phase of a group regression.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RegressionTiming {
    pub sampling_s: f64,
    pub advantage_s: f64,
    pub loss_s: f64,
    pub backprop_s: f64,
    pub optimize_s: f64,
}

impl RegressionTiming {
    pub fn total_s(&self) -> f64 {
        self.sampling_s + self.advantage_s + self.loss_s + self.backprop_s + self.optimize_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionReport {
    pub version: u64,
    pub timing: RegressionTiming,
    pub final_loss: f64,
    pub mean_zeta: f64,
    pub n_snapshots: usize,
}

/// Frozen per-snapshot teacher outputs and weights.
pub struct Teacher {
    pub features: Array2<f64>,
    pub dist: PolicyBatch,
    pub zeta: Vec<f64>,
}

/// Evaluates each snapshot's actor on its own states, once.
pub fn freeze_teachers(snapshots: &[AgentSnapshot], zetas: &[Vec<f64>]) -> Result<Vec<Teacher>> {
    snapshots
        .iter()
        .zip(zetas)
        .map(|(s, z)| {
            let features = features_matrix(&s.states);
            let dist = s.actor.evaluate(features.view())?;
            Ok(Teacher {
                features,
                dist,
                zeta: z.clone(),
            })
        })
        .collect()
}

/// ζ-weighted cross-entropy of the group against the teachers on the given
/// (teacher, row) entries, averaged, with its gradient.
pub fn regression_loss(group: &PolicyNet, teachers: &[Teacher], entries: &[(usize, usize)]) -> Result<(f64, Vec<f64>)> {
    let feats = gather(teachers, entries);
    let (pol, cache) = group.evaluate_cached(feats.view())?;
    let (loss, g) = head_loss(&pol, teachers, entries)?;
    Ok((loss, group.backward(&cache, &pol, &g)?))
}

fn gather(teachers: &[Teacher], entries: &[(usize, usize)]) -> Array2<f64> {
    let mut x = Array2::zeros((entries.len(), STATE_DIM));
    for (r, (t, i)) in entries.iter().enumerate() {
        x.row_mut(r).assign(&teachers[*t].features.row(*i));
    }
    x
}

fn head_loss(pol: &PolicyBatch, teachers: &[Teacher], entries: &[(usize, usize)]) -> Result<(f64, PolicyHeadGrad)> {
    let n = entries.len() as f64;
    let mut g = PolicyHeadGrad::zeros(entries.len());
    let mut loss = 0.0;
    for (r, (t, i)) in entries.iter().enumerate() {
        let teacher = &teachers[*t];
        let z = teacher.zeta[*i] / n;
        let (ld, dl) = xent_categorical(&teacher.dist.probs[*i], &pol.logits[r])?;
        let (mu_t, sig_t) = (teacher.dist.mu[*i], teacher.dist.sigma(*i));
        let lc = xent_gaussian(mu_t, sig_t, pol.mu[r], pol.sigma(r));
        let (d_mu, d_ls) = xent_gaussian_grad(mu_t, sig_t, pol.mu[r], pol.sigma(r));
        loss += z * (ld + lc);
        g.d_mu[r] = z * d_mu;
        g.d_log_std[r] = z * d_ls;
        for k in 0..NUM_GEAR_COMMANDS {
            g.d_logits[r][k] = z * dl[k];
        }
    }
    Ok((loss, g))
}

/// Advantage-weighted regression of the group policy, warm-started from
/// `group`. Each iteration draws `minibatch_per_agent` states from every
/// snapshot. Snapshots are read only.
pub fn group_regression(
    snapshots: &[AgentSnapshot],
    group: &GroupPolicy,
    cfg: &CoordinatorConfig,
    opt: &mut AdamState,
    rng: &mut ChaCha8Rng,
    zeta_override: Option<&[Vec<f64>]>,
) -> Result<(GroupPolicy, RegressionReport)> {
    cfg.validate()?;
    if snapshots.is_empty() {
        return Err(Error::invalid("group regression needs at least one snapshot"));
    }
    let arch = group.policy.hidden_layers();
    for s in snapshots {
        s.validate()?;
        if s.actor.hidden_layers() != arch || s.critic.mlp.spec().hidden_layers != arch {
            return Err(Error::Architecture(format!(
                "snapshot from agent {} has layers {:?}, group has {:?}",
                s.agent_id,
                s.actor.hidden_layers(),
                arch
            )));
        }
    }
    let mut timing = RegressionTiming::default();

    let t0 = Instant::now();
    let zetas: Vec<Vec<f64>> = match zeta_override {
        Some(z) => {
            if z.len() != snapshots.len() || z.iter().zip(snapshots).any(|(z, s)| z.len() != s.states.len()) {
                return Err(Error::invalid("advantage weights do not match snapshot shapes"));
            }
            z.to_vec()
        }
        None => snapshots
            .iter()
            .map(|s| {
                let v = estimate_value(&s.critic, &s.states, cfg.value_samples, rng)?;
                advantage_weight(&s.critic, &s.actor, &s.states, &v, cfg.beta)
            })
            .collect::<Result<_>>()?,
    };
    let teachers = freeze_teachers(snapshots, &zetas)?;
    timing.advantage_s += t0.elapsed().as_secs_f64();
    let zeta_count: usize = zetas.iter().map(Vec::len).sum();
    let mean_zeta = zetas.iter().flatten().sum::<f64>() / zeta_count as f64;

    let mut policy = group.policy.clone();
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.iterations {
        let t = Instant::now();
        let mut entries = Vec::with_capacity(snapshots.len() * cfg.minibatch_per_agent);
        for (k, s) in snapshots.iter().enumerate() {
            let b = s.states.len();
            if b <= cfg.minibatch_per_agent {
                entries.extend((0..b).map(|i| (k, i)));
            } else {
                entries.extend((0..cfg.minibatch_per_agent).map(|_| (k, rng.random_range(0..b))));
            }
        }
        let feats = gather(&teachers, &entries);
        timing.sampling_s += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let (pol, cache) = policy.evaluate_cached(feats.view())?;
        let (loss, head) = head_loss(&pol, &teachers, &entries)?;
        if !loss.is_finite() {
            return Err(Error::Diverged("group regression loss is not finite".into()));
        }
        final_loss = loss;
        timing.loss_s += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let grads = policy.backward(&cache, &pol, &head)?;
        timing.backprop_s += t.elapsed().as_secs_f64();

        let t = Instant::now();
        opt.step(policy.mlp.params_mut(), &grads)?;
        timing.optimize_s += t.elapsed().as_secs_f64();
    }
    let version = group.version + 1;
    Ok((
        GroupPolicy { policy, version },
        RegressionReport {
            version,
            timing,
            final_loss,
            mean_zeta,
            n_snapshots: snapshots.len(),
        },
    ))
}

/// Single writer of the group policy; owns its optimizer state across rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinator {
    pub config: CoordinatorConfig,
    group: GroupPolicy,
    opt: AdamState,
    rng: ChaCha8Rng,
}

impl Coordinator {
    pub fn new(config: CoordinatorConfig, initial: PolicyNet, seed: u64) -> Result<Self> {
        config.validate()?;
        let opt = AdamState::new(initial.mlp.params().len(), config.lr);
        Ok(Self {
            config,
            group: GroupPolicy {
                policy: initial,
                version: 0,
            },
            opt,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn group(&self) -> &GroupPolicy {
        &self.group
    }

    pub fn regress(&mut self, snapshots: &[AgentSnapshot]) -> Result<RegressionReport> {
        let (g, report) = group_regression(snapshots, &self.group, &self.config, &mut self.opt, &mut self.rng, None)?;
        self.group = g;
        Ok(report)
    }

    /// The wire message carrying the current group policy.
    pub fn broadcast(&self) -> Vec<u8> {
        crate::protocol::encode_group_policy(&self.group)
    }
}

/// One centralized actor-critic update on pooled fleet experience: the same
/// critic, E-step and M-step as an agent, without group terms.
pub fn impala_central_update(learner: &mut Learner, buffers: &[&ReplayBuffer]) -> Result<LearnStats> {
    learner.learn_cycle(buffers, None)
}
