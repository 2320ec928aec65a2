//! Measurements shared by the integration tests and the acceptance run. Each
//! check returns the measured quantity; callers compare it with their bound.

use std::path::PathBuf;

use fleet_core::agent::{m_step_loss, retrace_window, GroupTerms, MStepBatch, Multipliers};
use fleet_core::coordinator::{freeze_teachers, group_regression, regression_loss, AgentSnapshot, CoordinatorConfig, GroupPolicy};
use fleet_core::dynamics::{step_dynamics, Vehicle, VehicleState, MAX_FUEL_RATE_G_S};
use fleet_core::env::{Env, EnvConfig, HybridAction, RewardWeights, StateVector, NUM_GEAR_COMMANDS};
use fleet_core::error::DecodeError;
use fleet_core::harness::{run_seed, ScenarioConfig, Strategy};
use fleet_core::nn::{
    entropy_categorical, features_matrix, kl_categorical, kl_gaussian, xent_categorical, xent_gaussian,
    xent_gaussian_grad, AdamState, CriticNet, Mlp, MlpSpec, PolicyHeadGrad, PolicyNet, CRITIC_INPUT_DIM,
    POLICY_OUTPUT_DIM,
};
use fleet_core::protocol::{decode_message, encode_message, Message, FRAME_OVERHEAD};
use fleet_core::routes::{sample_episode, Route, RouteLabel, RouteSet};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{bisect, central_diff, max_rel_err, naive_retrace, random_simplex, random_states, rng, simplex_grid_argmin, tv_distance};

pub const GRAD_TOL: f64 = 1e-4;

fn small_actor(r: &mut ChaCha8Rng) -> PolicyNet {
    let mut a = PolicyNet::new(&[8, 8], 18_000.0, r).unwrap();
    for p in a.mlp.params_mut() {
        *p += 0.3 * r.sample::<f64, _>(StandardNormal);
    }
    a
}

fn with_params(actor: &PolicyNet, p: &[f64]) -> PolicyNet {
    let mut a = actor.clone();
    a.mlp.params_mut().copy_from_slice(p);
    a
}

fn random_mstep_batch(r: &mut ChaCha8Rng, n: usize, m: usize, group: bool) -> MStepBatch {
    let features = features_matrix(&random_states(r, n));
    let reference = small_actor(r).evaluate(features.view()).unwrap();
    let mut samples = Array2::zeros((n, m));
    let mut q_cont = Array2::zeros((n, m));
    let mut q_disc = Array2::zeros((n, NUM_GEAR_COMMANDS));
    for i in 0..n {
        let w = random_simplex(r, m);
        for j in 0..m {
            samples[[i, j]] = r.random_range(-1.2..1.2);
            q_cont[[i, j]] = w[j];
        }
        let wd = random_simplex(r, NUM_GEAR_COMMANDS);
        for k in 0..NUM_GEAR_COMMANDS {
            q_disc[[i, k]] = wd[k];
        }
    }
    let group = group.then(|| GroupTerms {
        group: small_actor(r).evaluate(features.view()).unwrap(),
        w_disc: (0..n).map(|_| r.random_range(0.0..1.0)).collect(),
        w_cont: (0..n).map(|_| r.random_range(0.0..1.0)).collect(),
    });
    MStepBatch {
        features,
        samples,
        q_cont,
        q_disc,
        reference,
        group,
    }
}

/// Parameter and input gradients of a bare MLP.
pub fn trunk_grad_err(seed: u64) -> f64 {
    let mut r = rng(seed);
    let spec = MlpSpec::new(4, vec![6, 5], 3).unwrap();
    let mlp = Mlp::init(spec.clone(), &mut r, 1.0).unwrap();
    let x = Array2::from_shape_fn((5, 4), |_| r.random_range(-2.0..2.0));
    let g = Array2::from_shape_fn((5, 3), |_| r.random_range(-1.0..1.0));
    let (_, cache) = mlp.forward_cached(x.view()).unwrap();
    let (dp, dx) = mlp.backward_full(&cache, g.view()).unwrap();
    let objective = |m: &Mlp, x: &Array2<f64>| (m.forward(x.view()).unwrap() * &g).sum();
    let num_p = central_diff(mlp.params(), |p| objective(&Mlp::from_params(spec.clone(), p.to_vec()).unwrap(), &x));
    let num_x = central_diff(x.as_slice().unwrap(), |xs| {
        objective(&mlp, &Array2::from_shape_vec((5, 4), xs.to_vec()).unwrap())
    });
    max_rel_err(&dp, &num_p).max(max_rel_err(dx.as_slice().unwrap(), &num_x))
}

/// Backprop of arbitrary head gradients (mean, squashed log-std, logits).
pub fn policy_heads_grad_err(seed: u64) -> f64 {
    let mut r = rng(seed);
    let actor = small_actor(&mut r);
    let feats = features_matrix(&random_states(&mut r, 6));
    let mut g = PolicyHeadGrad::zeros(6);
    for i in 0..6 {
        g.d_mu[i] = r.random_range(-1.0..1.0);
        g.d_log_std[i] = r.random_range(-1.0..1.0);
        for k in 0..NUM_GEAR_COMMANDS {
            g.d_logits[i][k] = r.random_range(-1.0..1.0);
        }
    }
    let objective = |a: &PolicyNet| {
        let b = a.evaluate(feats.view()).unwrap();
        (0..6)
            .map(|i| {
                g.d_mu[i] * b.mu[i]
                    + g.d_log_std[i] * b.log_std[i]
                    + (0..NUM_GEAR_COMMANDS).map(|k| g.d_logits[i][k] * b.logits[i][k]).sum::<f64>()
            })
            .sum::<f64>()
    };
    let (pol, cache) = actor.evaluate_cached(feats.view()).unwrap();
    let analytic = actor.backward(&cache, &pol, &g).unwrap();
    let numeric = central_diff(actor.mlp.params(), |p| objective(&with_params(&actor, p)));
    max_rel_err(&analytic, &numeric)
}

pub fn critic_grad_err(seed: u64) -> f64 {
    let mut r = rng(seed);
    let critic = CriticNet::new(&[8, 8], 100.0, &mut r).unwrap();
    let x = Array2::from_shape_fn((7, CRITIC_INPUT_DIM), |_| r.random_range(-1.0..1.0));
    let y: Vec<f64> = (0..7).map(|_| r.random_range(-20.0..0.0)).collect();
    let loss = |c: &CriticNet| {
        let q = c.q(x.view()).unwrap();
        q.iter().zip(&y).map(|(a, b)| 0.5 * (a - b).powi(2)).sum::<f64>()
    };
    let (q, cache) = critic.q_cached(x.view()).unwrap();
    let dq: Vec<f64> = q.iter().zip(&y).map(|(a, b)| a - b).collect();
    let analytic = critic.backward(&cache, &dq).unwrap();
    let numeric = central_diff(critic.mlp.params(), |p| {
        let mut c = critic.clone();
        c.mlp.params_mut().copy_from_slice(p);
        loss(&c)
    });
    max_rel_err(&analytic, &numeric)
}

pub fn xent_categorical_grad_err(seed: u64) -> f64 {
    let mut r = rng(seed);
    let p = random_simplex(&mut r, NUM_GEAR_COMMANDS);
    let logits: Vec<f64> = (0..NUM_GEAR_COMMANDS).map(|_| r.random_range(-3.0..3.0)).collect();
    let (_, analytic) = xent_categorical(&p, &logits).unwrap();
    let numeric = central_diff(&logits, |l| xent_categorical(&p, l).unwrap().0);
    max_rel_err(&analytic, &numeric)
}

/// Gradient with respect to the student's mean and log-std.
pub fn xent_gaussian_grad_err(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (mu_i, ls_i) = (r.random_range(-1.0..1.0), r.random_range(-3.0..0.5f64));
    let (mu_g, ls_g) = (r.random_range(-1.0..1.0), r.random_range(-3.0..0.5f64));
    let (d_mu, d_ls) = xent_gaussian_grad(mu_i, ls_i.exp(), mu_g, ls_g.exp());
    let numeric = central_diff(&[mu_g, ls_g], |x| xent_gaussian(mu_i, ls_i.exp(), x[0], x[1].exp()));
    max_rel_err(&[d_mu, d_ls], &numeric)
}

/// The three trust-region KL terms alone (E-step weights zeroed).
pub fn trust_region_kl_grad_err(seed: u64) -> f64 {
    let mut r = rng(seed);
    let actor = small_actor(&mut r);
    let mut batch = random_mstep_batch(&mut r, 5, 4, false);
    batch.q_cont.fill(0.0);
    batch.q_disc.fill(0.0);
    let alpha = Multipliers {
        mean: r.random_range(0.1..3.0),
        std: r.random_range(0.1..3.0),
        disc: r.random_range(0.1..3.0),
    };
    let (_, analytic) = m_step_loss(&actor, &batch, &alpha, 0.0, 0.0).unwrap();
    let numeric = central_diff(actor.mlp.params(), |p| m_step_loss(&with_params(&actor, p), &batch, &alpha, 0.0, 0.0).unwrap().0.total);
    max_rel_err(&analytic, &numeric)
}

/// The two forward-KL terms toward the group policy alone.
pub fn group_kl_grad_err(seed: u64) -> f64 {
    let mut r = rng(seed);
    let actor = small_actor(&mut r);
    let mut batch = random_mstep_batch(&mut r, 5, 4, true);
    batch.q_cont.fill(0.0);
    batch.q_disc.fill(0.0);
    let zero = Multipliers::splat(0.0);
    let (lc, ld) = (r.random_range(0.1..1.0), r.random_range(0.1..1.0));
    let (_, analytic) = m_step_loss(&actor, &batch, &zero, lc, ld).unwrap();
    let numeric = central_diff(actor.mlp.params(), |p| m_step_loss(&with_params(&actor, p), &batch, &zero, lc, ld).unwrap().0.total);
    max_rel_err(&analytic, &numeric)
}

pub fn m_step_grad_err(seed: u64) -> f64 {
    let mut r = rng(seed);
    let actor = small_actor(&mut r);
    let batch = random_mstep_batch(&mut r, 5, 6, true);
    let alpha = Multipliers {
        mean: r.random_range(0.0..2.0),
        std: r.random_range(0.0..2.0),
        disc: r.random_range(0.0..2.0),
    };
    let (lc, ld) = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
    let (_, analytic) = m_step_loss(&actor, &batch, &alpha, lc, ld).unwrap();
    let numeric = central_diff(actor.mlp.params(), |p| m_step_loss(&with_params(&actor, p), &batch, &alpha, lc, ld).unwrap().0.total);
    max_rel_err(&analytic, &numeric)
}

/// ζ-weighted distillation loss of the group policy.
pub fn group_regression_grad_err(seed: u64) -> f64 {
    let mut r = rng(seed);
    let group = small_actor(&mut r);
    let snapshots: Vec<AgentSnapshot> = (0..2)
        .map(|k| AgentSnapshot {
            agent_id: k,
            cycle_index: 0,
            actor: small_actor(&mut r),
            critic: CriticNet::new(&[8, 8], 100.0, &mut r).unwrap(),
            states: random_states(&mut r, 4),
        })
        .collect();
    let zetas: Vec<Vec<f64>> = (0..2).map(|_| (0..4).map(|_| r.random_range(0.1..3.0)).collect()).collect();
    let teachers = freeze_teachers(&snapshots, &zetas).unwrap();
    let entries: Vec<(usize, usize)> = (0..2).flat_map(|t| (0..4).map(move |i| (t, i))).collect();
    let (_, analytic) = regression_loss(&group, &teachers, &entries).unwrap();
    let numeric = central_diff(group.mlp.params(), |p| regression_loss(&with_params(&group, p), &teachers, &entries).unwrap().0);
    max_rel_err(&analytic, &numeric)
}

pub const GRADIENT_CHECKS: [(&str, fn(u64) -> f64); 9] = [
    ("trunk", trunk_grad_err),
    ("policy heads", policy_heads_grad_err),
    ("critic", critic_grad_err),
    ("categorical xent", xent_categorical_grad_err),
    ("gaussian xent", xent_gaussian_grad_err),
    ("trust-region KL", trust_region_kl_grad_err),
    ("group KL", group_kl_grad_err),
    ("m-step", m_step_grad_err),
    ("group regression", group_regression_grad_err),
];

/// Errors of the closed-form identities on one random pair:
/// Gaussian self-cross-entropy, KL(p‖p), and xent − (H + KL) for both families.
pub fn identity_errors(seed: u64) -> [f64; 3] {
    let mut r = rng(seed);
    let (mu, sigma) = (r.random_range(-5.0..5.0), r.random_range(1e-3..10.0f64));
    let self_xent = (xent_gaussian(mu, sigma, mu, sigma) - (0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln() + 0.5)).abs();

    let p = random_simplex(&mut r, NUM_GEAR_COMMANDS);
    let q = random_simplex(&mut r, NUM_GEAR_COMMANDS);
    let self_kl = kl_categorical(&p, &p).unwrap().abs().max(kl_gaussian(mu, sigma, mu, sigma).abs());

    let logits: Vec<f64> = q.iter().map(|x| x.ln()).collect();
    let cat = (xent_categorical(&p, &logits).unwrap().0 - (entropy_categorical(&p) + kl_categorical(&p, &q).unwrap())).abs();
    let (mi, si, mg, sg) = (r.random_range(-2.0..2.0), r.random_range(0.05..2.0), r.random_range(-2.0..2.0), r.random_range(0.05..2.0));
    let h_i = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * si * si).ln();
    let gauss = (xent_gaussian(mi, si, mg, sg) - (h_i + kl_gaussian(mi, si, mg, sg))).abs();
    [self_xent, self_kl, cat.max(gauss)]
}

pub const DISTILL_HIDDEN: [usize; 3] = [64, 64, 64];

fn output_layer_len() -> usize {
    POLICY_OUTPUT_DIM * (DISTILL_HIDDEN[2] + 1)
}

/// A teacher with a visibly non-uniform, state-dependent output.
fn sharp_teacher(seed: u64) -> PolicyNet {
    let mut p = PolicyNet::new(&DISTILL_HIDDEN, 1.0, &mut rng(seed)).unwrap();
    let n = p.mlp.params().len();
    for v in &mut p.mlp.params_mut()[n - output_layer_len()..] {
        *v *= 10.0;
    }
    p
}

/// A network that outputs the same distribution on every state.
pub fn constant_policy(probs: [f64; 3], mu: f64, raw_log_std: f64, seed: u64) -> PolicyNet {
    let mut p = PolicyNet::new(&DISTILL_HIDDEN, 1.0, &mut rng(seed)).unwrap();
    let n = p.mlp.params().len();
    let out = &mut p.mlp.params_mut()[n - output_layer_len()..];
    out.fill(0.0);
    let bias = &mut out[POLICY_OUTPUT_DIM * DISTILL_HIDDEN[2]..];
    bias[0] = mu;
    bias[1] = raw_log_std;
    for k in 0..3 {
        bias[2 + k] = probs[k].ln();
    }
    p
}

pub fn mean_kl(teacher: &PolicyNet, group: &PolicyNet, states: &[StateVector]) -> f64 {
    let pt = teacher.evaluate_states(states).unwrap();
    let pg = group.evaluate_states(states).unwrap();
    (0..states.len())
        .map(|i| kl_categorical(&pt.probs[i], &pg.probs[i]).unwrap() + kl_gaussian(pt.mu[i], pt.sigma(i), pg.mu[i], pg.sigma(i)))
        .sum::<f64>()
        / states.len() as f64
}

/// One snapshot, ζ ≡ 1, default coordinator settings (300 iterations):
/// mean KL(teacher‖group) over the snapshot states before and after.
pub fn single_teacher_kl(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let teacher = sharp_teacher(seed.wrapping_add(1));
    let states = random_states(&mut r, 256);
    let snap = AgentSnapshot {
        agent_id: 0,
        cycle_index: 0,
        actor: teacher.clone(),
        critic: CriticNet::new(&DISTILL_HIDDEN, 1.0, &mut r).unwrap(),
        states: states.clone(),
    };
    let group = GroupPolicy {
        policy: PolicyNet::new(&DISTILL_HIDDEN, 1.0, &mut r).unwrap(),
        version: 0,
    };
    let cfg = CoordinatorConfig {
        minibatch_per_agent: 256,
        ..Default::default()
    };
    assert_eq!(cfg.iterations, 300);
    let before = mean_kl(&teacher, &group.policy, &states);
    let mut opt = AdamState::new(group.policy.mlp.params().len(), cfg.lr);
    let ones = vec![vec![1.0; states.len()]];
    let (g, _) = group_regression(std::slice::from_ref(&snap), &group, &cfg, &mut opt, &mut r, Some(&ones)).unwrap();
    (before, mean_kl(&teacher, &g.policy, &states))
}

/// Two constant categorical teachers on one state with ζ = (1, e): TV
/// distance of the distilled categorical from the simplex grid minimizer.
pub fn weighted_teacher_tv(seed: u64) -> f64 {
    let mut r = rng(seed);
    let p1 = [0.7, 0.2, 0.1];
    let p2 = [0.1, 0.3, 0.6];
    let state = random_states(&mut r, 1);
    let snaps: Vec<AgentSnapshot> = [p1, p2]
        .iter()
        .enumerate()
        .map(|(k, p)| AgentSnapshot {
            agent_id: k as u32,
            cycle_index: 0,
            actor: constant_policy(*p, 0.1 * k as f64, -0.5, seed + 10 + k as u64),
            critic: CriticNet::new(&DISTILL_HIDDEN, 1.0, &mut r).unwrap(),
            states: state.clone(),
        })
        .collect();
    let group = GroupPolicy {
        policy: PolicyNet::new(&DISTILL_HIDDEN, 1.0, &mut r).unwrap(),
        version: 0,
    };
    let cfg = CoordinatorConfig {
        lr: 2e-3,
        iterations: 1500,
        minibatch_per_agent: 1,
        ..Default::default()
    };
    let zeta = [1.0, std::f64::consts::E];
    let z: Vec<Vec<f64>> = zeta.iter().map(|z| vec![*z]).collect();
    let mut opt = AdamState::new(group.policy.mlp.params().len(), cfg.lr);
    let (g, _) = group_regression(&snaps, &group, &cfg, &mut opt, &mut r, Some(&z)).unwrap();
    let q = g.policy.evaluate_states(&state).unwrap().probs[0];
    tv_distance(&q, &simplex_grid_argmin(&[p1, p2], &zeta, 1000))
}

/// Relative gap between the recursive and the unrolled retrace targets on
/// one random window of `n` steps.
pub fn retrace_window_err(seed: u64, n: usize, gamma: f64) -> f64 {
    let mut r = rng(seed);
    let rewards: Vec<f64> = (0..n).map(|_| -r.random_range(0.0..1.0)).collect();
    let q: Vec<f64> = (0..n).map(|_| r.random_range(-100.0..0.0)).collect();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(-100.0..0.0)).collect();
    let c: Vec<f64> = (0..n).map(|_| r.random_range(0.0..=1.0)).collect();
    let fast = retrace_window(&rewards, &q, &v, &c, gamma);
    let slow = naive_retrace(&rewards, &q, &v, &c, gamma);
    fast.iter()
        .zip(&slow)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Net flat-road force at speed `v` under wheel torque `t`, from the
/// physical constants directly.
pub fn net_force(vehicle: &Vehicle, t: f64, v: f64) -> f64 {
    let p = &vehicle.params;
    let rolling = p.mass_kg * 9.81 * p.c_rolling;
    let aero = 0.5 * p.air_density_kg_m3 * p.c_drag * p.frontal_area_m2 * v * v;
    t / p.wheel_radius_m - rolling - aero
}

/// Relative gap between the simulated terminal velocity under constant
/// torque in top gear and the bisection root of the force balance.
pub fn terminal_velocity_err(mass: f64, torque: f64) -> f64 {
    let v = Vehicle::default().with_mass(mass);
    let mut s = VehicleState::at_rest(10, &v.engine);
    for _ in 0..20_000 {
        s = step_dynamics(&s, &v, torque, 0.0, 0.5).unwrap();
    }
    let root = bisect(0.0, 200.0, |x| net_force(&v, torque, x));
    (s.velocity_m_s - root).abs() / root
}

fn random_weights(r: &mut impl Rng) -> RewardWeights {
    RewardWeights {
        accel: r.random_range(0.0..1.0),
        fuel: r.random_range(0.0..1.0),
        shift: r.random_range(0.0..1.0),
        torque: r.random_range(0.0..1.0),
        power_reserve: r.random_range(0.01..1.0),
    }
}

#[derive(Debug, Default)]
pub struct RewardFuzz {
    pub steps: usize,
    pub episodes: usize,
    pub violations: usize,
    pub max_fuel_g_s: f64,
}

/// Environment steps under sticky random actions on random episodes and
/// random reward weights, counting reward or component bound violations.
pub fn fuzz_rewards(total_steps: usize, seed: u64) -> RewardFuzz {
    let mut r = rng(seed);
    let sets: Vec<RouteSet> = [RouteLabel::Urban, RouteLabel::Suburban, RouteLabel::Highway]
        .into_iter()
        .map(|l| RouteSet::new(vec![Route::representative(l).unwrap()], l).unwrap())
        .collect();
    let mut out = RewardFuzz::default();
    while out.steps < total_steps {
        let weights = if out.episodes % 2 == 0 { RewardWeights::default() } else { random_weights(&mut r) };
        let cfg = EnvConfig {
            weights,
            ..EnvConfig::default()
        };
        let ep = sample_episode(&sets[out.episodes % sets.len()], r.random()).unwrap();
        let mut env = Env::new(&cfg, &ep).unwrap();
        let mut action = HybridAction { torque_nm: 0.0, gear_cmd: 0 };
        for _ in 0..4000 {
            if env.is_done() || out.steps == total_steps {
                break;
            }
            if r.random_bool(0.2) {
                action = HybridAction {
                    torque_nm: r.random_range(-18_000.0..=18_000.0),
                    gear_cmd: r.random_range(-1..=1),
                };
            }
            let o = env.step(action).unwrap();
            let components_ok = o.components.as_array().iter().all(|c| (0.0..=1.0).contains(c));
            let reward_ok = o.reward <= 0.0 && o.reward >= -weights.total();
            if !(components_ok && reward_ok) {
                out.violations += 1;
            }
            out.max_fuel_g_s = out.max_fuel_g_s.max(o.vehicle.fuel_rate_g_s);
            out.steps += 1;
        }
        out.episodes += 1;
    }
    out
}

pub fn fuel_cap() -> f64 {
    MAX_FUEL_RATE_G_S
}

fn random_hidden(r: &mut ChaCha8Rng) -> Vec<usize> {
    (0..r.random_range(1..=3)).map(|_| r.random_range(1..=8)).collect()
}

pub fn random_message(r: &mut ChaCha8Rng) -> Message {
    match r.random_range(0..4) {
        0 => {
            let hidden = random_hidden(r);
            let n = r.random_range(1..20);
            let mut states = random_states(r, n);
            // arbitrary finite values, not just plausible ones
            for s in states.iter_mut().step_by(3) {
                *s = StateVector::from_array(std::array::from_fn(|_| r.random_range(-1e300..1e300)));
            }
            Message::Snapshot(AgentSnapshot {
                agent_id: r.random(),
                cycle_index: r.random(),
                actor: PolicyNet::new(&hidden, r.random_range(1.0..20_000.0), r).unwrap(),
                critic: CriticNet::new(&hidden, r.random_range(0.1..10.0), r).unwrap(),
                states,
            })
        }
        1 => {
            let hidden = random_hidden(r);
            Message::GroupPolicy(GroupPolicy {
                policy: PolicyNet::new(&hidden, r.random_range(1.0..20_000.0), r).unwrap(),
                version: r.random(),
            })
        }
        2 => Message::RoundBegin {
            round: r.random(),
            group_version: r.random(),
        },
        _ => Message::RoundAck {
            agent_id: r.random(),
            round: r.random(),
            adopted_version: r.random(),
        },
    }
}

/// Messages whose decode∘encode is not the identity (as a value and as bytes).
pub fn round_trip_failures(n: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    (0..n)
        .filter(|_| {
            let m = random_message(&mut r);
            let bytes = encode_message(&m);
            match decode_message(&bytes) {
                Ok(back) => back != m || encode_message(&back) != bytes,
                Err(_) => true,
            }
        })
        .count()
}

/// Every payload byte of `messages` random messages flipped by a random
/// non-zero mask: (flips reported as CRC mismatches, flips).
pub fn flip_detection(messages: usize, seed: u64) -> (usize, usize) {
    let mut r = rng(seed);
    let mut flips = 0;
    let mut detected = 0;
    for _ in 0..messages {
        let bytes = encode_message(&random_message(&mut r));
        for i in FRAME_OVERHEAD - 4..bytes.len() - 4 {
            let mut bad = bytes.clone();
            bad[i] ^= r.random_range(1..=255u8);
            flips += 1;
            if matches!(decode_message(&bad), Err(DecodeError::CrcMismatch { .. })) {
                detected += 1;
            }
        }
    }
    (detected, flips)
}

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

pub fn golden_messages() -> Vec<(&'static str, Message)> {
    let mut r = rng(93);
    let actor = PolicyNet::new(&[4, 3], 18_000.0, &mut r).unwrap();
    let critic = CriticNet::new(&[4, 3], 50.0, &mut r).unwrap();
    let states = random_states(&mut r, 3);
    vec![
        (
            "snapshot.bin",
            Message::Snapshot(AgentSnapshot {
                agent_id: 2,
                cycle_index: 7,
                actor: actor.clone(),
                critic,
                states,
            }),
        ),
        ("group_policy.bin", Message::GroupPolicy(GroupPolicy { policy: actor, version: 5 })),
        ("round_begin.bin", Message::RoundBegin { round: 7, group_version: 5 }),
        (
            "round_ack.bin",
            Message::RoundAck {
                agent_id: 2,
                round: 7,
                adopted_version: 5,
            },
        ),
    ]
}

/// Compares each golden message with its stored file, rewriting the files
/// first when `UPDATE_GOLDEN=1`. Returns the names that differ.
pub fn golden_mismatches() -> Vec<String> {
    let dir = golden_dir();
    let update = std::env::var("UPDATE_GOLDEN").is_ok_and(|v| v == "1");
    if update {
        std::fs::create_dir_all(&dir).unwrap();
    }
    golden_messages()
        .into_iter()
        .filter_map(|(name, m)| {
            let bytes = encode_message(&m);
            let path = dir.join(name);
            if update {
                std::fs::write(&path, &bytes).unwrap();
            }
            let ok = std::fs::read(&path).is_ok_and(|stored| stored == bytes && decode_message(&stored).is_ok_and(|d| d == m));
            (!ok).then(|| name.to_string())
        })
        .collect()
}

/// A fleet scenario small enough to train in seconds.
pub fn tiny_scenario(strategy: Strategy, fleet: usize, cycles: usize) -> ScenarioConfig {
    let mut c = ScenarioConfig::desk();
    c.strategy = strategy;
    c.fleet_size = fleet;
    c.cycles = cycles;
    c.route_duration_s = 200.0;
    c.update_interval_s = 100.0;
    c.synthetic_per_set = 2;
    c.eval_duration_s = Some(200.0);
    c.init_episodes = 1;
    c.init.actor_steps = 100;
    c.init.critic_steps = 10;
    c.mpo.batch_size = 64;
    c.mpo.n_batches = 2;
    c.mpo.hidden_layers = vec![16, 16];
    c.snapshot_states = 64;
    c.coordinator.minibatch_per_agent = 64;
    c.coordinator.iterations = 20;
    c
}

/// Shared strategy with zero group weights and no regression against the
/// individual strategy under the same seed. `None` when everything matches
/// bitwise, otherwise what differed.
pub fn baseline_reduction_mismatch(fleet: usize, cycles: usize, seed: u64) -> Option<String> {
    let mut shared = tiny_scenario(Strategy::Shared, fleet, cycles);
    shared.mpo.lambda_cont = 0.0;
    shared.mpo.lambda_disc = 0.0;
    shared.regression_enabled = false;
    let individual = tiny_scenario(Strategy::Individual, fleet, cycles);
    let a = run_seed(&shared, seed, None).unwrap();
    let b = run_seed(&individual, seed, None).unwrap();
    if a.report.initial != b.report.initial {
        return Some("initial evaluation".into());
    }
    if a.report.rows != b.report.rows {
        return Some("evaluation rows".into());
    }
    for (x, y) in a.agents.iter().zip(&b.agents) {
        let (p, q) = (&x.learner, &y.learner);
        if p.actor != q.actor || p.critic != q.critic || p.target_critic != q.target_critic {
            return Some(format!("agent {} networks", x.id));
        }
        if p.actor_opt != q.actor_opt || p.critic_opt != q.critic_opt || p.multipliers != q.multipliers {
            return Some(format!("agent {} optimizer state", x.id));
        }
        if x.buffer != y.buffer {
            return Some(format!("agent {} replay buffer", x.id));
        }
    }
    None
}

/// Settings for the traffic and regression-time scaling measurement.
pub fn scaling_scenario() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::desk();
    cfg.cycles = 3;
    cfg.route_duration_s = 200.0;
    cfg.update_interval_s = 100.0;
    cfg.synthetic_per_set = 2;
    cfg.eval_duration_s = Some(100.0);
    cfg.init_episodes = 1;
    cfg.init.actor_steps = 200;
    cfg.init.critic_steps = 20;
    cfg.seeds = vec![3];
    cfg
}
