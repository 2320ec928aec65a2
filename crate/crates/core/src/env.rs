//! Per-vehicle MDP: state assembly, feasibility projection of hybrid actions,
//! the five-term reward and the episode loop against a route-driven leader.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::driver::{desired_acceleration, LeadState, MIN_DESIRED_ACCEL_M_S2};
use crate::dynamics::{
    driveline_speed, power_reserve, step_dynamics, Vehicle, VehicleState, MAX_TRACTION_TORQUE_NM, NUM_GEARS,
};
use crate::error::{Error, Result};
use crate::routes::EpisodeConfig;

/// MDP and dynamics step (s).
pub const DEFAULT_DT_S: f64 = 0.5;
/// Normalizer for the acceleration-tracking error: the span of the IDM clamp.
pub const ACCEL_ERROR_SPAN_M_S2: f64 = 9.0;
/// Diesel density used for MPG (g/L).
pub const DIESEL_DENSITY_G_L: f64 = 850.0;
pub const METERS_PER_MILE: f64 = 1609.344;
pub const LITERS_PER_GALLON: f64 = 3.78541;
pub const STATE_DIM: usize = 6;
pub const NUM_GEAR_COMMANDS: usize = 3;

/// The agent's observation `[V_e, A_e, A_des, n_g, A_des_prev, n_g_prev]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector {
    pub v_e: f64,
    pub a_e: f64,
    pub a_des: f64,
    pub n_g: f64,
    pub a_des_prev: f64,
    pub n_g_prev: f64,
}

impl StateVector {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [self.v_e, self.a_e, self.a_des, self.n_g, self.a_des_prev, self.n_g_prev]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        Self {
            v_e: a[0],
            a_e: a[1],
            a_des: a[2],
            n_g: a[3],
            a_des_prev: a[4],
            n_g_prev: a[5],
        }
    }

    /// Roughly unit-scaled network input.
    pub fn features(&self) -> [f64; STATE_DIM] {
        [
            self.v_e / 25.0,
            self.a_e / 3.0,
            self.a_des / 3.0,
            (self.n_g - 5.5) / 4.5,
            self.a_des_prev / 3.0,
            (self.n_g_prev - 5.5) / 4.5,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state vector"));
        }
        let gears = 1.0..=NUM_GEARS as f64;
        if !gears.contains(&self.n_g) || !gears.contains(&self.n_g_prev) {
            return Err(Error::invalid("state gear outside 1..10"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridAction {
    /// Requested wheel torque (Nm), within ±T_t,max.
    pub torque_nm: f64,
    /// Gear command in {-1, 0, +1}.
    pub gear_cmd: i8,
}

impl HybridAction {
    pub fn gear_index(&self) -> usize {
        (self.gear_cmd + 1) as usize
    }

    pub fn gear_cmd_from_index(i: usize) -> i8 {
        i as i8 - 1
    }

    pub fn validate(&self) -> Result<()> {
        if !self.torque_nm.is_finite() {
            return Err(Error::NonFinite("action torque"));
        }
        if self.torque_nm.abs() > MAX_TRACTION_TORQUE_NM {
            return Err(Error::invalid(format!("torque {} exceeds ±{MAX_TRACTION_TORQUE_NM}", self.torque_nm)));
        }
        if !(-1..=1).contains(&self.gear_cmd) {
            return Err(Error::invalid(format!("gear command {} not in {{-1,0,1}}", self.gear_cmd)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    pub accel: f64,
    pub fuel: f64,
    pub shift: f64,
    pub torque: f64,
    pub power_reserve: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            accel: 0.45,
            fuel: 0.25,
            shift: 0.15,
            torque: 0.05,
            power_reserve: 0.10,
        }
    }
}

impl RewardWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.accel, self.fuel, self.shift, self.torque, self.power_reserve]
    }

    pub fn total(&self) -> f64 {
        self.as_array().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid("reward weights must be finite and non-negative"));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(Error::invalid("at least one reward weight must be positive"));
        }
        Ok(())
    }
}

/// The five normalized penalty terms of one step, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardComponents {
    pub accel: f64,
    pub fuel: f64,
    pub shift: f64,
    pub torque: f64,
    pub power_reserve: f64,
}

impl RewardComponents {
    pub fn as_array(&self) -> [f64; 5] {
        [self.accel, self.fuel, self.shift, self.torque, self.power_reserve]
    }

    pub fn reward(&self, w: &RewardWeights) -> f64 {
        -self
            .as_array()
            .iter()
            .zip(w.as_array())
            .map(|(c, w)| c * w)
            .sum::<f64>()
    }
}

/// One replay-buffer record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: StateVector,
    pub action: HybridAction,
    pub reward: f64,
    pub next_state: StateVector,
    pub behavior_log_prob_cont: f64,
    pub behavior_log_prob_disc: f64,
    /// Terminal (collision): no bootstrapping past this step.
    pub done: bool,
    /// Last step of its episode for a non-terminal reason (time limit).
    pub truncated: bool,
}

impl Transition {
    pub fn ends_episode(&self) -> bool {
        self.done || self.truncated
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    /// Nominal vehicle; each episode overrides the mass.
    pub vehicle: Vehicle,
    pub weights: RewardWeights,
    pub dt_s: f64,
    /// Lower bound on the power-reserve normalizer (W).
    pub power_floor_w: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            vehicle: Vehicle::default(),
            weights: RewardWeights::default(),
            dt_s: DEFAULT_DT_S,
            power_floor_w: 10_000.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        self.weights.validate()?;
        if !(self.dt_s.is_finite() && self.dt_s > 0.0) {
            return Err(Error::invalid("dt must be positive"));
        }
        if !(self.power_floor_w.is_finite() && self.power_floor_w > 0.0) {
            return Err(Error::invalid("power floor must be positive"));
        }
        Ok(())
    }

    pub fn max_torque_nm(&self) -> f64 {
        self.vehicle.params.max_traction_torque_nm
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next_state: StateVector,
    pub reward: f64,
    pub components: RewardComponents,
    /// Wheel torque actually applied after feasibility projection (Nm).
    pub applied_torque_nm: f64,
    pub vehicle: VehicleState,
    pub collided: bool,
}

/// One simulated truck following one episode's lead vehicle.
#[derive(Debug, Clone)]
pub struct Env {
    vehicle: Vehicle,
    weights: RewardWeights,
    dt_s: f64,
    power_floor_w: f64,
    route: crate::routes::Route,
    idm: crate::driver::IdmParams,
    t_s: f64,
    ego: VehicleState,
    lead: LeadState,
    a_des: f64,
    a_des_prev: f64,
    gear_prev: u8,
    done: bool,
    scheduled_steps: usize,
    steps_taken: usize,
}

impl Env {
    pub fn new(cfg: &EnvConfig, episode: &EpisodeConfig) -> Result<Self> {
        cfg.validate()?;
        episode.validate()?;
        let vehicle = cfg.vehicle.clone().with_mass(episode.mass_kg);
        vehicle.validate()?;
        let ego = VehicleState::at_rest(1, &vehicle.engine);
        let lead = LeadState {
            position_m: episode.initial_gap_m,
            velocity_m_s: episode.route.speed_at(0.0),
        };
        let a_des = desired_acceleration(ego.velocity_m_s, ego.position_m, &lead, &episode.idm)?;
        Ok(Self {
            vehicle,
            weights: cfg.weights,
            dt_s: cfg.dt_s,
            power_floor_w: cfg.power_floor_w,
            route: episode.route.clone(),
            idm: episode.idm,
            t_s: 0.0,
            ego,
            lead,
            a_des,
            a_des_prev: a_des,
            gear_prev: ego.gear_index,
            done: false,
            scheduled_steps: (episode.duration_s / cfg.dt_s + 1e-9).floor() as usize,
            steps_taken: 0,
        })
    }

    pub fn state(&self) -> StateVector {
        StateVector {
            v_e: self.ego.velocity_m_s,
            a_e: self.ego.accel_m_s2,
            a_des: self.a_des,
            n_g: self.ego.gear_index as f64,
            a_des_prev: self.a_des_prev,
            n_g_prev: self.gear_prev as f64,
        }
    }

    pub fn vehicle_state(&self) -> &VehicleState {
        &self.ego
    }

    pub fn vehicle(&self) -> &Vehicle {
        &self.vehicle
    }

    pub fn lead(&self) -> &LeadState {
        &self.lead
    }

    pub fn time_s(&self) -> f64 {
        self.t_s
    }

    pub fn dt_s(&self) -> f64 {
        self.dt_s
    }

    pub fn scheduled_steps(&self) -> usize {
        self.scheduled_steps
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    /// Steps left before the episode's scheduled end (0 after a collision).
    pub fn remaining_steps(&self) -> usize {
        if self.done {
            0
        } else {
            self.scheduled_steps.saturating_sub(self.steps_taken)
        }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Gear after applying `cmd`: shifts leaving 1..10, upshifts that would
    /// lug the engine below idle, and downshifts that would over-rev it are
    /// refused.
    pub fn feasible_gear(&self, cmd: i8) -> Result<u8> {
        let gear = self.ego.gear_index;
        let candidate = gear as i16 + cmd as i16;
        if cmd == 0 || candidate < 1 || candidate > NUM_GEARS as i16 {
            return Ok(gear);
        }
        let candidate = candidate as u8;
        let w = driveline_speed(self.ego.velocity_m_s, candidate, &self.vehicle.params)?;
        let ok = if cmd > 0 {
            w >= self.vehicle.engine.idle_speed_rad_s
        } else {
            w <= self.vehicle.engine.max_speed_rad_s
        };
        Ok(if ok { candidate } else { gear })
    }

    /// Projects a requested wheel torque onto what the driveline can deliver
    /// in `gear`. Traction is cut when the engine would exceed its governed speed.
    pub fn feasible_torque(&self, requested_nm: f64, gear: u8) -> Result<f64> {
        let p = &self.vehicle.params;
        let v = self.ego.velocity_m_s;
        let upper = if driveline_speed(v, gear, p)? > self.vehicle.engine.max_speed_rad_s {
            0.0
        } else {
            self.vehicle.max_wheel_torque_nm(v, gear)?
        };
        Ok(requested_nm.clamp(-p.max_traction_torque_nm, upper))
    }

    pub fn step(&mut self, action: HybridAction) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        action.validate()?;
        let gear_before = self.ego.gear_index;
        let gear = self.feasible_gear(action.gear_cmd)?;
        let applied = self.feasible_torque(action.torque_nm, gear)?;
        let mut pre = self.ego;
        pre.gear_index = gear;
        let next = step_dynamics(&pre, &self.vehicle, applied, 0.0, self.dt_s)?;

        let lead_v0 = self.lead.velocity_m_s;
        self.t_s += self.dt_s;
        let lead_v1 = self.route.speed_at(self.t_s);
        self.lead = LeadState {
            position_m: self.lead.position_m + 0.5 * (lead_v0 + lead_v1) * self.dt_s,
            velocity_m_s: lead_v1,
        };

        let wheel_power = applied / self.vehicle.params.wheel_radius_m * next.velocity_m_s;
        let reserve = power_reserve(
            next.velocity_m_s,
            gear,
            wheel_power,
            &self.vehicle.engine,
            &self.vehicle.params,
        )?;
        let reserve_norm = reserve.max_w.max(self.power_floor_w);
        let components = RewardComponents {
            accel: ((self.a_des - next.accel_m_s2).abs() / ACCEL_ERROR_SPAN_M_S2).min(1.0),
            fuel: (next.fuel_rate_g_s / self.vehicle.params.max_fuel_rate_g_s).clamp(0.0, 1.0),
            shift: (gear as f64 - gear_before as f64).abs().min(1.0),
            torque: (action.torque_nm.abs() / self.vehicle.params.max_traction_torque_nm).min(1.0),
            power_reserve: ((reserve.max_w - reserve.reserve_w) / reserve_norm).clamp(0.0, 1.0),
        };
        let reward = components.reward(&self.weights);

        let (a_des_next, collided) =
            match desired_acceleration(next.velocity_m_s, next.position_m, &self.lead, &self.idm) {
                Ok(a) => (a, false),
                Err(Error::Collision { .. }) => (MIN_DESIRED_ACCEL_M_S2, true),
                Err(e) => return Err(e),
            };
        self.a_des_prev = self.a_des;
        self.a_des = a_des_next;
        self.gear_prev = gear_before;
        self.ego = next;
        self.done = collided;
        self.steps_taken += 1;
        Ok(StepOutcome {
            next_state: self.state(),
            reward,
            components,
            applied_torque_nm: applied,
            vehicle: next,
            collided,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyAction {
    pub action: HybridAction,
    pub log_prob_cont: f64,
    pub log_prob_disc: f64,
}

/// Anything that maps observations to hybrid actions.
pub trait Policy {
    fn act(&self, state: &StateVector, mode: ActionMode, rng: &mut ChaCha8Rng) -> Result<PolicyAction>;
}

/// Hand-tuned controller: feed-forward torque for the demanded acceleration
/// plus engine-speed-band gear selection.
#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicPolicy {
    pub vehicle: Vehicle,
    pub upshift_rad_s: f64,
    pub downshift_rad_s: f64,
    /// Multiplier on the feed-forward torque.
    pub torque_gain: f64,
}

impl HeuristicPolicy {
    pub fn new(vehicle: Vehicle) -> Self {
        Self {
            vehicle,
            upshift_rad_s: 1500.0 * std::f64::consts::PI / 30.0,
            downshift_rad_s: 950.0 * std::f64::consts::PI / 30.0,
            torque_gain: 1.0,
        }
    }

    pub fn action(&self, s: &StateVector) -> Result<HybridAction> {
        let p = &self.vehicle.params;
        let v = s.v_e.max(0.0);
        let resist = p.rolling_resistance_n(v, 0.0) + p.aero_drag_n(v);
        let torque = (self.torque_gain * (p.effective_mass_kg() * s.a_des + resist) * p.wheel_radius_m)
            .clamp(-p.max_traction_torque_nm, p.max_traction_torque_nm);
        let gear = (s.n_g.round() as i64).clamp(1, NUM_GEARS as i64) as u8;
        let w = driveline_speed(v, gear, p)?;
        let gear_cmd = if w > self.upshift_rad_s && gear < NUM_GEARS {
            1
        } else if w < self.downshift_rad_s && gear > 1 {
            -1
        } else {
            0
        };
        Ok(HybridAction { torque_nm: torque, gear_cmd })
    }
}

impl Policy for HeuristicPolicy {
    fn act(&self, state: &StateVector, _mode: ActionMode, _rng: &mut ChaCha8Rng) -> Result<PolicyAction> {
        Ok(PolicyAction {
            action: self.action(state)?,
            log_prob_cont: 0.0,
            log_prob_disc: 0.0,
        })
    }
}

/// Uniformly random actions over the hybrid action box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformPolicy {
    pub max_torque_nm: f64,
}

impl Policy for UniformPolicy {
    fn act(&self, _state: &StateVector, _mode: ActionMode, rng: &mut ChaCha8Rng) -> Result<PolicyAction> {
        let torque_nm = rng.random_range(-self.max_torque_nm..=self.max_torque_nm);
        let gear_cmd = rng.random_range(-1i8..=1);
        Ok(PolicyAction {
            action: HybridAction { torque_nm, gear_cmd },
            log_prob_cont: -(2.0 * self.max_torque_nm).ln(),
            log_prob_disc: -(3.0f64).ln(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub t_s: f64,
    pub transition: Transition,
    pub components: RewardComponents,
    pub applied_torque_nm: f64,
    pub fuel_rate_g_s: f64,
    pub position_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    /// Steps the episode was scheduled to run.
    pub scheduled_steps: usize,
    pub steps: usize,
    /// Mean reward per scheduled step; steps lost to a collision count at the
    /// minimum reward.
    pub mean_reward: f64,
    pub mpg: f64,
    pub accel_rmse_m_s2: f64,
    pub shifts_per_km: f64,
    pub distance_m: f64,
    pub fuel_g: f64,
    pub collided: bool,
    /// False when no step was taken and the ratios above are undefined (NaN).
    pub defined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub steps: Vec<StepRecord>,
    pub metrics: EpisodeMetrics,
}

impl EpisodeResult {
    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.steps.iter().map(|s| &s.transition)
    }
}

/// Miles per US gallon of diesel for the given fuel mass and distance.
///
/// Zero fuel over a positive distance yields `+inf`.
pub fn compute_mpg(total_fuel_g: f64, distance_m: f64) -> Result<f64> {
    if !(distance_m > 0.0) || !distance_m.is_finite() {
        return Err(Error::invalid(format!("MPG needs a positive distance, got {distance_m}")));
    }
    if !(total_fuel_g >= 0.0) {
        return Err(Error::invalid(format!("fuel mass must be ≥ 0, got {total_fuel_g}")));
    }
    let miles = distance_m / METERS_PER_MILE;
    let gallons = total_fuel_g / (DIESEL_DENSITY_G_L * LITERS_PER_GALLON);
    Ok(if gallons == 0.0 { f64::INFINITY } else { miles / gallons })
}

/// Metrics of a (possibly truncated) trajectory.
pub fn episode_metrics(steps: &[StepRecord], scheduled_steps: usize, weights: &RewardWeights, dt_s: f64) -> EpisodeMetrics {
    let n = steps.len();
    let collided = steps.last().is_some_and(|s| s.transition.done);
    if n == 0 {
        return EpisodeMetrics {
            scheduled_steps,
            steps: 0,
            mean_reward: f64::NAN,
            mpg: f64::NAN,
            accel_rmse_m_s2: f64::NAN,
            shifts_per_km: f64::NAN,
            distance_m: 0.0,
            fuel_g: 0.0,
            collided: false,
            defined: false,
        };
    }
    let missing = scheduled_steps.saturating_sub(n) as f64;
    let reward_sum: f64 = steps.iter().map(|s| s.transition.reward).sum::<f64>() - missing * weights.total();
    let fuel_g: f64 = steps.iter().map(|s| s.fuel_rate_g_s * dt_s).sum();
    // positions are recorded after each step; recover the start position
    let start_m = steps[0].position_m - steps[0].transition.state.v_e * dt_s;
    let distance_m = steps[n - 1].position_m - start_m;
    let sq: f64 = steps
        .iter()
        .map(|s| (s.transition.state.a_des - s.transition.next_state.a_e).powi(2))
        .sum();
    let shifts = steps
        .iter()
        .filter(|s| s.transition.next_state.n_g != s.transition.state.n_g)
        .count() as f64;
    EpisodeMetrics {
        scheduled_steps,
        steps: n,
        mean_reward: reward_sum / (n as f64 + missing),
        mpg: if distance_m > 0.0 { compute_mpg(fuel_g, distance_m).unwrap_or(f64::NAN) } else { f64::NAN },
        accel_rmse_m_s2: (sq / n as f64).sqrt(),
        shifts_per_km: if distance_m > 0.0 { shifts / (distance_m / 1000.0) } else { f64::NAN },
        distance_m,
        fuel_g,
        collided,
        defined: true,
    }
}

/// Runs `policy` over one episode. A collision ends the trajectory early and
/// marks its last transition terminal.
pub fn run_episode(
    policy: &dyn Policy,
    cfg: &EnvConfig,
    episode: &EpisodeConfig,
    mode: ActionMode,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeResult> {
    let mut env = Env::new(cfg, episode)?;
    let scheduled = env.scheduled_steps();
    let steps = rollout(policy, &mut env, scheduled, mode, rng)?;
    let metrics = episode_metrics(&steps, scheduled, &cfg.weights, cfg.dt_s);
    Ok(EpisodeResult { steps, metrics })
}

/// Advances `env` by up to `max_steps` under `policy`, stopping at the
/// scheduled end (last transition truncated) or a collision (last
/// transition terminal).
pub fn rollout(
    policy: &dyn Policy,
    env: &mut Env,
    max_steps: usize,
    mode: ActionMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<StepRecord>> {
    let n = max_steps.min(env.remaining_steps());
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let k = env.steps_taken;
        let state = env.state();
        let pa = policy.act(&state, mode, rng)?;
        let out = env.step(pa.action)?;
        steps.push(StepRecord {
            t_s: k as f64 * env.dt_s,
            transition: Transition {
                state,
                action: pa.action,
                reward: out.reward,
                next_state: out.next_state,
                behavior_log_prob_cont: pa.log_prob_cont,
                behavior_log_prob_disc: pa.log_prob_disc,
                done: out.collided,
                truncated: !out.collided && env.steps_taken == env.scheduled_steps,
            },
            components: out.components,
            applied_torque_nm: out.applied_torque_nm,
            fuel_rate_g_s: out.vehicle.fuel_rate_g_s,
            position_m: out.vehicle.position_m,
        });
        if out.collided {
            log::warn!("collision at t={:.1} s", env.steps_taken as f64 * env.dt_s);
            break;
        }
    }
    Ok(steps)
}

/// CSV dump of a trajectory, one row per step.
pub fn trajectory_csv(steps: &[StepRecord]) -> String {
    let mut out = String::from(
        "t_s,v_e,a_e,a_des,n_g,a_des_prev,n_g_prev,torque_nm,gear_cmd,applied_torque_nm,reward,\
         c_accel,c_fuel,c_shift,c_torque,c_power_reserve,fuel_rate_g_s,position_m,done\n",
    );
    for s in steps {
        let st = s.transition.state.to_array();
        let c = s.components.as_array();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.t_s,
            st[0],
            st[1],
            st[2],
            st[3],
            st[4],
            st[5],
            s.transition.action.torque_nm,
            s.transition.action.gear_cmd,
            s.applied_torque_nm,
            s.transition.reward,
            c[0],
            c[1],
            c[2],
            c[3],
            c[4],
            s.fuel_rate_g_s,
            s.position_m,
            u8::from(s.transition.done)
        );
    }
    out
}
