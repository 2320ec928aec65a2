//! Scenario runner: builds fleets from a config, trains them under one of
//! four coordination strategies, evaluates greedily after every route, and
//! writes CSV and SVG outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{initial_checkpoint, Agent, InitOptions, Learner, MpoConfig};
use crate::coordinator::{impala_central_update, Coordinator, CoordinatorConfig, RegressionTiming};
use crate::env::{run_episode, ActionMode, EnvConfig, EpisodeMetrics};
use crate::error::{Error, Result};
use crate::nn::{CriticNet, PolicyNet};
use crate::protocol::{run_round, RoundReport, RoundSchedule, SyncMode, TrafficLedger};
use crate::routes::{
    compose_evaluation_route, sample_episode_with, synthesize_routes, EpisodeConfig, EpisodeSampling, Route,
    RouteLabel, RouteSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Individual,
    Shared,
    Impala,
    ImpalaModified,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Individual => "individual",
            Self::Shared => "shared",
            Self::Impala => "impala",
            Self::ImpalaModified => "impala_modified",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "individual" => Self::Individual,
            "shared" => Self::Shared,
            "impala" => Self::Impala,
            "impala_modified" => Self::ImpalaModified,
            other => return Err(Error::invalid(format!("unknown strategy {other:?}"))),
        })
    }
}

/// A route named by label (bundled representative profile) or file path.
#[derive(Debug, Clone, PartialEq)]
pub enum RouteSource {
    Builtin(RouteLabel),
    File(PathBuf),
}

impl RouteSource {
    fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "urban" | "suburban" | "highway" => Ok(Self::Builtin(s.parse()?)),
            "" => Err(Error::invalid("empty route name")),
            path => Ok(Self::File(PathBuf::from(path))),
        }
    }

    fn to_text(&self) -> String {
        match self {
            Self::Builtin(l) => l.as_str().to_string(),
            Self::File(p) => p.display().to_string(),
        }
    }

    pub fn load(&self, base_dir: &Path) -> Result<Route> {
        match self {
            Self::Builtin(l) => Route::representative(*l),
            Self::File(p) => {
                let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                let text = std::fs::read_to_string(&path)?;
                Route::parse(&text, RouteLabel::Custom)
            }
        }
    }
}

/// Evaluation route: one profile or a concatenation of leading fractions.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalRouteSpec {
    Single(RouteSource),
    Mix(Vec<(RouteSource, f64)>),
}

impl EvalRouteSpec {
    /// `suburban`, a path, or `suburban:0.45+urban:0.10+highway:0.45`.
    pub fn parse(s: &str) -> Result<Self> {
        if !s.contains(':') {
            return Ok(Self::Single(RouteSource::parse(s)?));
        }
        let parts = s
            .split('+')
            .map(|p| {
                let (name, frac) = p
                    .rsplit_once(':')
                    .ok_or_else(|| Error::invalid(format!("mix entry {p:?} lacks ':fraction'")))?;
                let f: f64 = frac
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad fraction {frac:?}")))?;
                Ok((RouteSource::parse(name)?, f))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::Mix(parts))
    }

    fn to_text(&self) -> String {
        match self {
            Self::Single(s) => s.to_text(),
            Self::Mix(parts) => parts
                .iter()
                .map(|(s, f)| format!("{}:{f}", s.to_text()))
                .collect::<Vec<_>>()
                .join("+"),
        }
    }

    pub fn load(&self, base_dir: &Path) -> Result<Route> {
        match self {
            Self::Single(s) => s.load(base_dir),
            Self::Mix(parts) => {
                let loaded = parts
                    .iter()
                    .map(|(s, f)| Ok((s.load(base_dir)?, *f)))
                    .collect::<Result<Vec<_>>>()?;
                compose_evaluation_route(&loaded)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub strategy: Strategy,
    pub fleet_size: usize,
    /// Training routes per run.
    pub cycles: usize,
    pub seeds: Vec<u64>,
    pub sync_mode: SyncMode,
    pub route_duration_s: f64,
    pub update_interval_s: f64,
    /// Route sets, assigned to vehicles round-robin.
    pub train_sets: Vec<RouteSource>,
    /// Synthetic routes generated from each set's seed route (0 keeps the
    /// seed route itself).
    pub synthetic_per_set: usize,
    pub synthesis_seed: u64,
    pub eval_route: EvalRouteSpec,
    pub eval_duration_s: Option<f64>,
    pub eval_mass_kg: f64,
    /// States per snapshot.
    pub snapshot_states: usize,
    /// Whether shared runs exchange snapshots and regress a group policy.
    pub regression_enabled: bool,
    /// Warm-up episodes per route set for the initial checkpoint.
    pub init_episodes: usize,
    pub env: EnvConfig,
    pub sampling: EpisodeSampling,
    pub mpo: MpoConfig,
    pub coordinator: CoordinatorConfig,
    pub init: InitOptions,
    /// Directory against which relative route paths resolve.
    pub base_dir: PathBuf,
}

impl ScenarioConfig {
    /// Workstation defaults.
    pub fn desk() -> Self {
        let mpo = MpoConfig::desk();
        Self {
            name: "scenario".into(),
            strategy: Strategy::Shared,
            fleet_size: 3,
            cycles: 20,
            seeds: vec![1],
            sync_mode: SyncMode::Sync,
            route_duration_s: 1000.0,
            update_interval_s: 500.0,
            train_sets: vec![RouteSource::Builtin(RouteLabel::Suburban)],
            synthetic_per_set: 5,
            synthesis_seed: 11,
            eval_route: EvalRouteSpec::Single(RouteSource::Builtin(RouteLabel::Suburban)),
            eval_duration_s: None,
            eval_mass_kg: 16_000.0,
            snapshot_states: mpo.batch_size,
            regression_enabled: true,
            init_episodes: 2,
            env: EnvConfig::default(),
            sampling: EpisodeSampling::default(),
            coordinator: CoordinatorConfig {
                minibatch_per_agent: mpo.batch_size,
                ..CoordinatorConfig::default()
            },
            mpo,
            init: InitOptions::desk(),
            base_dir: PathBuf::from("."),
        }
    }

    /// Full-size values of the reference hyperparameter table.
    pub fn paper() -> Self {
        let mpo = MpoConfig::paper();
        Self {
            route_duration_s: 10_000.0,
            update_interval_s: 2500.0,
            snapshot_states: mpo.batch_size,
            coordinator: CoordinatorConfig {
                minibatch_per_agent: mpo.batch_size,
                ..CoordinatorConfig::default()
            },
            mpo,
            init: InitOptions::default(),
            ..Self::desk()
        }
    }

    pub fn schedule(&self) -> RoundSchedule {
        RoundSchedule {
            mode: self.sync_mode,
            update_interval_s: self.update_interval_s,
            route_duration_s: self.route_duration_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fleet_size == 0 || self.cycles == 0 || self.seeds.is_empty() {
            return Err(Error::invalid("fleet_size and cycles must be ≥ 1 and seeds non-empty"));
        }
        if self.train_sets.is_empty() || self.snapshot_states == 0 {
            return Err(Error::invalid("need at least one training route set and one snapshot state"));
        }
        if !(self.eval_mass_kg > 0.0) || self.eval_duration_s.is_some_and(|d| !(d > 0.0)) {
            return Err(Error::invalid("evaluation mass and duration must be positive"));
        }
        self.schedule().validate()?;
        self.env.validate()?;
        self.sampling.validate()?;
        self.mpo.validate()?;
        self.coordinator.validate()
    }

    /// Parses `key = value` lines under `[section]` headers on top of the
    /// desk (or full-size) defaults. `#` starts a comment.
    pub fn parse(text: &str, paper_scale: bool) -> Result<Self> {
        let mut cfg = if paper_scale { Self::paper() } else { Self::desk() };
        let mut section = String::new();
        let mut seen_snapshot = false;
        let mut seen_minibatch = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('[') {
                section = h
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config {
                        line: line_no,
                        msg: "unterminated section header".into(),
                    })?
                    .trim()
                    .to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            seen_snapshot |= section == "scenario" && k == "snapshot_states";
            seen_minibatch |= section == "coordinator" && k == "minibatch_per_agent";
            cfg.set(&section, k, v).map_err(|e| Error::Config {
                line: line_no,
                msg: format!("[{section}] {k}: {e}"),
            })?;
        }
        if !seen_snapshot {
            cfg.snapshot_states = cfg.mpo.batch_size;
        }
        if !seen_minibatch {
            cfg.coordinator.minibatch_per_agent = cfg.mpo.batch_size;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, paper_scale: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text, paper_scale)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Ok(cfg)
    }

    /// Applies one `[section] key = value` setting.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        fn num<T: FromStr>(v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::invalid(format!("cannot parse {v:?}")))
        }
        fn boolean(v: &str) -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(Error::invalid(format!("expected a boolean, got {v:?}"))),
            }
        }
        fn list<T: FromStr>(v: &str) -> Result<Vec<T>> {
            v.split(',').map(|x| num(x.trim())).collect()
        }
        let m = &mut self.mpo;
        let p = &mut self.env.vehicle.params;
        match (section, key) {
            ("scenario", "name") => self.name = v.to_string(),
            ("scenario", "strategy") => self.strategy = v.parse()?,
            ("scenario", "fleet_size") => self.fleet_size = num(v)?,
            ("scenario", "cycles") => self.cycles = num(v)?,
            ("scenario", "seeds") => self.seeds = list(v)?,
            ("scenario", "sync_mode") => {
                self.sync_mode = match v {
                    "sync" => SyncMode::Sync,
                    "async" => SyncMode::Async,
                    _ => return Err(Error::invalid("sync_mode is sync or async")),
                }
            }
            ("scenario", "route_duration_s") => self.route_duration_s = num(v)?,
            ("scenario", "update_interval_s") => self.update_interval_s = num(v)?,
            ("scenario", "snapshot_states") => self.snapshot_states = num(v)?,
            ("scenario", "regression") => self.regression_enabled = boolean(v)?,
            ("routes", "train") => self.train_sets = v.split(';').map(RouteSource::parse).collect::<Result<_>>()?,
            ("routes", "synthetic_per_set") => self.synthetic_per_set = num(v)?,
            ("routes", "synthesis_seed") => self.synthesis_seed = num(v)?,
            ("routes", "eval") => self.eval_route = EvalRouteSpec::parse(v)?,
            ("routes", "eval_duration_s") => self.eval_duration_s = Some(num(v)?),
            ("routes", "eval_mass_kg") => self.eval_mass_kg = num(v)?,
            ("vehicle", "mass_min_kg") => self.sampling.mass_kg.0 = num(v)?,
            ("vehicle", "mass_max_kg") => self.sampling.mass_kg.1 = num(v)?,
            ("vehicle", "max_traction_torque_nm") => p.max_traction_torque_nm = num(v)?,
            ("vehicle", "frontal_area_m2") => p.frontal_area_m2 = num(v)?,
            ("vehicle", "wheel_radius_m") => p.wheel_radius_m = num(v)?,
            ("vehicle", "rolling_coefficient") => p.c_rolling = num(v)?,
            ("vehicle", "drag_coefficient") => p.c_drag = num(v)?,
            ("vehicle", "air_density_kg_m3") => p.air_density_kg_m3 = num(v)?,
            ("vehicle", "final_drive_ratio") => p.final_drive_ratio = num(v)?,
            ("vehicle", "final_drive_efficiency") => p.final_drive_eff = num(v)?,
            ("vehicle", "max_fuel_rate_g_s") => p.max_fuel_rate_g_s = num(v)?,
            ("vehicle", "gear_ratios") => {
                let r: Vec<f64> = list(v)?;
                p.gear_ratios = r
                    .try_into()
                    .map_err(|_| Error::invalid("gear_ratios needs exactly 10 values"))?;
            }
            ("driver", "max_accel_m_s2") => self.sampling.idm.max_accel_m_s2 = num(v)?,
            ("driver", "comfort_decel_m_s2") => self.sampling.idm.comfort_decel_m_s2 = num(v)?,
            ("driver", "accel_exponent") => self.sampling.idm.accel_exponent = num(v)?,
            ("driver", "time_headway_min_s") => self.sampling.time_headway_s.0 = num(v)?,
            ("driver", "time_headway_max_s") => self.sampling.time_headway_s.1 = num(v)?,
            ("driver", "min_gap_min_m") => self.sampling.min_gap_m.0 = num(v)?,
            ("driver", "min_gap_max_m") => self.sampling.min_gap_m.1 = num(v)?,
            ("driver", "time_step_s") => self.env.dt_s = num(v)?,
            ("reward", "accel") => self.env.weights.accel = num(v)?,
            ("reward", "fuel") => self.env.weights.fuel = num(v)?,
            ("reward", "shift") => self.env.weights.shift = num(v)?,
            ("reward", "torque") => self.env.weights.torque = num(v)?,
            ("reward", "power_reserve") => self.env.weights.power_reserve = num(v)?,
            ("mpo", "gamma") => m.gamma = num(v)?,
            ("mpo", "retrace_steps") => m.retrace_steps = num(v)?,
            ("mpo", "retrace_lambda") => m.retrace_lambda = num(v)?,
            ("mpo", "xi_cont") => m.xi_cont = num(v)?,
            ("mpo", "xi_disc") => m.xi_disc = num(v)?,
            ("mpo", "eps_mean") => m.eps_mean = num(v)?,
            ("mpo", "eps_std") => m.eps_std = num(v)?,
            ("mpo", "eps_disc") => m.eps_disc = num(v)?,
            ("mpo", "lambda_cont") => m.lambda_cont = num(v)?,
            ("mpo", "lambda_disc") => m.lambda_disc = num(v)?,
            ("mpo", "eps_group_disc") => m.eps_group_disc = num(v)?,
            ("mpo", "eps_group_mean") => m.eps_group_mean = num(v)?,
            ("mpo", "batch_size") => m.batch_size = num(v)?,
            ("mpo", "n_batches") => m.n_batches = num(v)?,
            ("mpo", "action_samples") => m.action_samples = num(v)?,
            ("mpo", "tau_critic") => m.tau_critic = num(v)?,
            ("mpo", "tau_advantage") => m.tau_advantage = num(v)?,
            ("mpo", "actor_lr") => m.actor_lr = num(v)?,
            ("mpo", "critic_lr") => m.critic_lr = num(v)?,
            ("mpo", "dual_lr") => m.dual_lr = num(v)?,
            ("mpo", "initial_multiplier") => m.initial_multiplier = num(v)?,
            ("mpo", "actor_steps_per_batch") => m.actor_steps_per_batch = num(v)?,
            ("mpo", "critic_steps_per_batch") => m.critic_steps_per_batch = num(v)?,
            ("mpo", "max_grad_norm") => m.max_grad_norm = if v == "none" { None } else { Some(num(v)?) },
            ("mpo", "memory_size") => m.buffer_capacity = num(v)?,
            ("mpo", "hidden_layers") => m.hidden_layers = list(v)?,
            ("mpo", "terminal_value") => m.terminal_value = num(v)?,
            ("coordinator", "beta") => self.coordinator.beta = num(v)?,
            ("coordinator", "group_lr") => self.coordinator.lr = num(v)?,
            ("coordinator", "iterations") => self.coordinator.iterations = num(v)?,
            ("coordinator", "minibatch_per_agent") => self.coordinator.minibatch_per_agent = num(v)?,
            ("coordinator", "value_samples") => self.coordinator.value_samples = num(v)?,
            ("init", "actor_steps") => self.init.actor_steps = num(v)?,
            ("init", "critic_steps") => self.init.critic_steps = num(v)?,
            ("init", "minibatch") => self.init.minibatch = num(v)?,
            ("init", "lr") => self.init.lr = num(v)?,
            ("init", "initial_sigma") => self.init.initial_sigma = num(v)?,
            ("init", "teacher_upshift_rpm") => self.init.teacher_upshift_rpm = num(v)?,
            ("init", "teacher_downshift_rpm") => self.init.teacher_downshift_rpm = num(v)?,
            ("init", "teacher_torque_gain") => self.init.teacher_torque_gain = num(v)?,
            ("init", "episodes") => self.init_episodes = num(v)?,
            _ => return Err(Error::invalid("unknown key")),
        }
        Ok(())
    }

    /// Every setting as parseable config text.
    pub fn to_text(&self) -> String {
        let m = &self.mpo;
        let p = &self.env.vehicle.params;
        let w = &self.env.weights;
        let c = &self.coordinator;
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "[scenario]");
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "strategy = {}", self.strategy.as_str());
        let _ = writeln!(s, "fleet_size = {}", self.fleet_size);
        let _ = writeln!(s, "cycles = {}", self.cycles);
        let _ = writeln!(s, "seeds = {}", self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        let _ = writeln!(s, "sync_mode = {}", if self.sync_mode == SyncMode::Sync { "sync" } else { "async" });
        let _ = writeln!(s, "route_duration_s = {}", self.route_duration_s);
        let _ = writeln!(s, "update_interval_s = {}", self.update_interval_s);
        let _ = writeln!(s, "snapshot_states = {}", self.snapshot_states);
        let _ = writeln!(s, "regression = {}", self.regression_enabled);
        let _ = writeln!(s, "\n[routes]");
        let _ = writeln!(s, "train = {}", self.train_sets.iter().map(RouteSource::to_text).collect::<Vec<_>>().join(";"));
        let _ = writeln!(s, "synthetic_per_set = {}", self.synthetic_per_set);
        let _ = writeln!(s, "synthesis_seed = {}", self.synthesis_seed);
        let _ = writeln!(s, "eval = {}", self.eval_route.to_text());
        if let Some(d) = self.eval_duration_s {
            let _ = writeln!(s, "eval_duration_s = {d}");
        }
        let _ = writeln!(s, "eval_mass_kg = {}", self.eval_mass_kg);
        let _ = writeln!(s, "\n[vehicle]");
        let _ = writeln!(s, "mass_min_kg = {}", self.sampling.mass_kg.0);
        let _ = writeln!(s, "mass_max_kg = {}", self.sampling.mass_kg.1);
        let _ = writeln!(s, "max_traction_torque_nm = {}", p.max_traction_torque_nm);
        let _ = writeln!(s, "frontal_area_m2 = {}", p.frontal_area_m2);
        let _ = writeln!(s, "wheel_radius_m = {}", p.wheel_radius_m);
        let _ = writeln!(s, "rolling_coefficient = {}", p.c_rolling);
        let _ = writeln!(s, "drag_coefficient = {}", p.c_drag);
        let _ = writeln!(s, "air_density_kg_m3 = {}", p.air_density_kg_m3);
        let _ = writeln!(s, "final_drive_ratio = {}", p.final_drive_ratio);
        let _ = writeln!(s, "final_drive_efficiency = {}", p.final_drive_eff);
        let _ = writeln!(s, "max_fuel_rate_g_s = {}", p.max_fuel_rate_g_s);
        let _ = writeln!(s, "gear_ratios = {}", join(&p.gear_ratios));
        let _ = writeln!(s, "\n[driver]");
        let _ = writeln!(s, "max_accel_m_s2 = {}", self.sampling.idm.max_accel_m_s2);
        let _ = writeln!(s, "comfort_decel_m_s2 = {}", self.sampling.idm.comfort_decel_m_s2);
        let _ = writeln!(s, "accel_exponent = {}", self.sampling.idm.accel_exponent);
        let _ = writeln!(s, "time_headway_min_s = {}", self.sampling.time_headway_s.0);
        let _ = writeln!(s, "time_headway_max_s = {}", self.sampling.time_headway_s.1);
        let _ = writeln!(s, "min_gap_min_m = {}", self.sampling.min_gap_m.0);
        let _ = writeln!(s, "min_gap_max_m = {}", self.sampling.min_gap_m.1);
        let _ = writeln!(s, "time_step_s = {}", self.env.dt_s);
        let _ = writeln!(s, "\n[reward]");
        let _ = writeln!(s, "accel = {}", w.accel);
        let _ = writeln!(s, "fuel = {}", w.fuel);
        let _ = writeln!(s, "shift = {}", w.shift);
        let _ = writeln!(s, "torque = {}", w.torque);
        let _ = writeln!(s, "power_reserve = {}", w.power_reserve);
        let _ = writeln!(s, "\n[mpo]");
        for (k, v) in [
            ("gamma", m.gamma),
            ("retrace_lambda", m.retrace_lambda),
            ("xi_cont", m.xi_cont),
            ("xi_disc", m.xi_disc),
            ("eps_mean", m.eps_mean),
            ("eps_std", m.eps_std),
            ("eps_disc", m.eps_disc),
            ("lambda_cont", m.lambda_cont),
            ("lambda_disc", m.lambda_disc),
            ("eps_group_disc", m.eps_group_disc),
            ("eps_group_mean", m.eps_group_mean),
            ("tau_critic", m.tau_critic),
            ("tau_advantage", m.tau_advantage),
            ("actor_lr", m.actor_lr),
            ("critic_lr", m.critic_lr),
            ("dual_lr", m.dual_lr),
            ("initial_multiplier", m.initial_multiplier),
            ("terminal_value", m.terminal_value),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, v) in [
            ("retrace_steps", m.retrace_steps),
            ("batch_size", m.batch_size),
            ("n_batches", m.n_batches),
            ("action_samples", m.action_samples),
            ("actor_steps_per_batch", m.actor_steps_per_batch),
            ("critic_steps_per_batch", m.critic_steps_per_batch),
            ("memory_size", m.buffer_capacity),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(
            s,
            "max_grad_norm = {}",
            m.max_grad_norm.map_or("none".to_string(), |x| x.to_string())
        );
        let _ = writeln!(
            s,
            "hidden_layers = {}",
            m.hidden_layers.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        );
        let _ = writeln!(s, "\n[coordinator]");
        let _ = writeln!(s, "beta = {}", c.beta);
        let _ = writeln!(s, "group_lr = {}", c.lr);
        let _ = writeln!(s, "iterations = {}", c.iterations);
        let _ = writeln!(s, "minibatch_per_agent = {}", c.minibatch_per_agent);
        let _ = writeln!(s, "value_samples = {}", c.value_samples);
        let _ = writeln!(s, "\n[init]");
        let _ = writeln!(s, "actor_steps = {}", self.init.actor_steps);
        let _ = writeln!(s, "critic_steps = {}", self.init.critic_steps);
        let _ = writeln!(s, "minibatch = {}", self.init.minibatch);
        let _ = writeln!(s, "lr = {}", self.init.lr);
        let _ = writeln!(s, "initial_sigma = {}", self.init.initial_sigma);
        let _ = writeln!(s, "teacher_upshift_rpm = {}", self.init.teacher_upshift_rpm);
        let _ = writeln!(s, "teacher_downshift_rpm = {}", self.init.teacher_downshift_rpm);
        let _ = writeln!(s, "teacher_torque_gain = {}", self.init.teacher_torque_gain);
        let _ = writeln!(s, "episodes = {}", self.init_episodes);
        s
    }

    /// Training route sets (one per entry of `train_sets`) and the
    /// evaluation route.
    pub fn resolve_routes(&self) -> Result<(Vec<RouteSet>, Route)> {
        let sets = self
            .train_sets
            .iter()
            .enumerate()
            .map(|(k, src)| {
                let seed_route = src.load(&self.base_dir)?;
                if self.synthetic_per_set == 0 {
                    RouteSet::new(vec![seed_route.clone()], seed_route.label)
                } else {
                    synthesize_routes(&seed_route, self.synthetic_per_set, self.synthesis_seed.wrapping_add(k as u64))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((sets, self.eval_route.load(&self.base_dir)?))
    }
}

/// One greedy evaluation of one agent after one training route.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub cycle: usize,
    pub agent: usize,
    pub metrics: EpisodeMetrics,
    /// Mean reward per step over the agent's training route this cycle.
    pub train_reward_per_step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleSummary {
    pub cycle: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl CycleSummary {
    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub scenario: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub fleet_size: usize,
    pub initial: EpisodeMetrics,
    pub rows: Vec<EvalRow>,
    pub timing: Vec<(u64, usize, RegressionTiming)>,
    pub rounds: Vec<RoundReport>,
    pub traffic: TrafficLedger,
    pub dual_fallbacks: usize,
    pub group_bound_violations: usize,
}

impl RunReport {
    /// Fleet mean and extremes of a metric per cycle.
    pub fn summarize(&self, metric: impl Fn(&EpisodeMetrics) -> f64) -> Vec<CycleSummary> {
        let mut by_cycle: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            by_cycle.entry(r.cycle).or_default().push(metric(&r.metrics));
        }
        by_cycle
            .into_iter()
            .map(|(cycle, v)| CycleSummary {
                cycle,
                mean: v.iter().sum::<f64>() / v.len() as f64,
                min: v.iter().cloned().fold(f64::INFINITY, f64::min),
                max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            })
            .collect()
    }

    pub fn reward_summary(&self) -> Vec<CycleSummary> {
        self.summarize(|m| m.mean_reward)
    }

    /// Mean regression wall time per round.
    pub fn mean_regression_s(&self) -> f64 {
        if self.timing.is_empty() {
            return 0.0;
        }
        self.timing.iter().map(|t| t.2.total_s()).sum::<f64>() / self.timing.len() as f64
    }
}

/// Final state of a run.
pub struct RunOutcome {
    pub report: RunReport,
    pub agents: Vec<Agent>,
    pub coordinator: Option<Coordinator>,
}

/// Per-agent generator seeds: agent `k` gets the `k`-th draw, so a fleet's
/// agents coincide with the leading agents of any larger fleet.
pub fn agent_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.next_u64()).collect()
}

fn episode_seed_stream(agent_seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(agent_seed);
    r.set_stream(3);
    r
}

/// Warm-up episodes and shared initial checkpoint for `seed`.
pub fn build_initial_checkpoint(cfg: &ScenarioConfig, sets: &[RouteSet], seed: u64) -> Result<(PolicyNet, CriticNet)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(5);
    let mut episodes = Vec::new();
    for set in sets {
        for _ in 0..cfg.init_episodes.max(1) {
            episodes.push(sample_episode_with(set, &cfg.sampling, r.next_u64())?.with_duration(cfg.route_duration_s));
        }
    }
    initial_checkpoint(&cfg.mpo, &cfg.env, &episodes, &cfg.init, r.next_u64())
}

fn evaluate(actor: &PolicyNet, cfg: &ScenarioConfig, eval: &EpisodeConfig) -> Result<EpisodeMetrics> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    Ok(run_episode(actor, &cfg.env, eval, ActionMode::Greedy, &mut unused)?.metrics)
}

/// Trains one fleet for `cfg.cycles` routes under `seed`. A precomputed
/// initial checkpoint may be passed to share it across strategies.
pub fn run_seed(cfg: &ScenarioConfig, seed: u64, checkpoint: Option<&(PolicyNet, CriticNet)>) -> Result<RunOutcome> {
    cfg.validate()?;
    let (sets, eval_route) = cfg.resolve_routes()?;
    let built;
    let (actor0, critic0) = match checkpoint {
        Some(c) => c,
        None => {
            built = build_initial_checkpoint(cfg, &sets, seed)?;
            &built
        }
    };
    let mut eval_ep = EpisodeConfig::nominal(eval_route, cfg.eval_mass_kg);
    if let Some(d) = cfg.eval_duration_s {
        eval_ep = eval_ep.with_duration(d);
    }
    let initial = evaluate(actor0, cfg, &eval_ep)?;

    let seeds = agent_seeds(seed, cfg.fleet_size);
    let mut agents = seeds
        .iter()
        .enumerate()
        .map(|(k, s)| Agent::new(k, cfg.mpo.clone(), actor0.clone(), critic0.clone(), *s))
        .collect::<Result<Vec<_>>>()?;
    let mut episode_rngs: Vec<ChaCha8Rng> = seeds.iter().map(|s| episode_seed_stream(*s)).collect();
    let mut central = match cfg.strategy {
        Strategy::Impala | Strategy::ImpalaModified => {
            Some(Learner::new(cfg.mpo.clone(), actor0.clone(), critic0.clone(), seeds[0])?)
        }
        _ => None,
    };
    let mut coordinator = match cfg.strategy {
        Strategy::Shared if cfg.regression_enabled => {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(7);
            Some(Coordinator::new(cfg.coordinator.clone(), actor0.clone(), r.next_u64())?)
        }
        _ => None,
    };

    let schedule = cfg.schedule();
    let steps_per_interval = (cfg.update_interval_s / cfg.env.dt_s).round() as usize;
    let mut report = RunReport {
        scenario: cfg.name.clone(),
        strategy: cfg.strategy,
        seed,
        fleet_size: cfg.fleet_size,
        initial,
        rows: Vec::new(),
        timing: Vec::new(),
        rounds: Vec::new(),
        traffic: TrafficLedger::new(cfg.fleet_size),
        dual_fallbacks: 0,
        group_bound_violations: 0,
    };

    for cycle in 1..=cfg.cycles {
        let ctx = |k: usize| move |e: Error| e.with_context(k, cycle as u64);
        let mut envs = Vec::with_capacity(agents.len());
        for (k, r) in episode_rngs.iter_mut().enumerate() {
            let set = &sets[k % sets.len()];
            let ep = sample_episode_with(set, &cfg.sampling, r.next_u64())
                .map(|e| e.with_duration(cfg.route_duration_s))
                .map_err(ctx(k))?;
            envs.push(crate::env::Env::new(&cfg.env, &ep).map_err(ctx(k))?);
        }
        let mut reward_sums = vec![(0.0, 0usize); agents.len()];
        for _ in 0..schedule.updates_per_route() {
            for (k, agent) in agents.iter_mut().enumerate() {
                let steps = agent.collect(&mut envs[k], steps_per_interval).map_err(ctx(k))?;
                reward_sums[k].0 += steps.iter().map(|s| s.transition.reward).sum::<f64>();
                reward_sums[k].1 += steps.len();
            }
            match (cfg.strategy, central.as_mut()) {
                (Strategy::Impala, Some(c)) => {
                    let buffers: Vec<_> = agents.iter().map(|a| &a.buffer).collect();
                    let s = impala_central_update(c, &buffers).map_err(ctx(0))?;
                    report.dual_fallbacks += s.dual_fallbacks;
                    for a in agents.iter_mut() {
                        a.learner.adopt_networks(c);
                    }
                }
                _ => {
                    for (k, agent) in agents.iter_mut().enumerate() {
                        let s = agent.learn_cycle().map_err(ctx(k))?;
                        report.dual_fallbacks += s.dual_fallbacks;
                        report.group_bound_violations += s.group_bound_violations;
                    }
                }
            }
        }
        match cfg.strategy {
            Strategy::Shared => {
                if let Some(coord) = coordinator.as_mut() {
                    let available = vec![true; agents.len()];
                    let round = run_round(
                        &mut agents,
                        &available,
                        coord,
                        &schedule,
                        cycle as u64,
                        cfg.snapshot_states,
                        &mut report.traffic,
                    )?;
                    if let Some(reg) = &round.regression {
                        report.timing.push((round.round, reg.n_snapshots, reg.timing));
                    }
                    report.rounds.push(round);
                }
            }
            Strategy::ImpalaModified => {
                let c = central.as_mut().expect("central learner");
                let buffers: Vec<_> = agents.iter().map(|a| &a.buffer).collect();
                let s = impala_central_update(c, &buffers).map_err(ctx(0))?;
                report.dual_fallbacks += s.dual_fallbacks;
                for a in agents.iter_mut() {
                    a.learner.adopt_networks(c);
                }
            }
            _ => {}
        }
        for (k, agent) in agents.iter().enumerate() {
            let metrics = evaluate(agent.actor(), cfg, &eval_ep).map_err(ctx(k))?;
            let (sum, n) = reward_sums[k];
            report.rows.push(EvalRow {
                cycle,
                agent: k,
                metrics,
                train_reward_per_step: if n == 0 { f64::NAN } else { sum / n as f64 },
            });
        }
        log::info!(
            "{} seed {seed} cycle {cycle}: fleet-mean reward/step {:.5}",
            cfg.strategy.as_str(),
            report.rows[report.rows.len() - agents.len()..].iter().map(|r| r.metrics.mean_reward).sum::<f64>()
                / agents.len() as f64
        );
    }
    Ok(RunOutcome {
        report,
        agents,
        coordinator,
    })
}

/// Runs every seed of `cfg`.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Vec<RunReport>> {
    cfg.seeds.iter().map(|s| run_seed(cfg, *s, None).map(|o| o.report)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `y` on `x`. `None` with fewer than two
/// distinct abscissae.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let (mx, my) = (x[..n].iter().sum::<f64>() / n as f64, y[..n].iter().sum::<f64>() / n as f64);
    let sxx: f64 = x[..n].iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x[..n].iter().zip(&y[..n]).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = y[..n].iter().map(|b| (b - my).powi(2)).sum();
    let ss_res: f64 = x[..n].iter().zip(&y[..n]).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub fleet_size: usize,
    pub runs: usize,
    /// Normal fit (mean, std) over seeds of the final fleet-mean reward/step.
    pub reward_mean: f64,
    pub reward_std: f64,
    pub regression_s: f64,
    pub bytes_up_per_round: f64,
    pub bytes_down_per_round: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    pub time_fit: Option<LinearFit>,
    pub up_bytes_fit: Option<LinearFit>,
}

impl ScalingTable {
    /// Regression-time increments per added agent between consecutive sizes.
    pub fn per_agent_increments(&self) -> Vec<f64> {
        self.rows
            .windows(2)
            .map(|w| (w[1].regression_s - w[0].regression_s) / (w[1].fleet_size - w[0].fleet_size) as f64)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "fleet_size,runs,reward_mean,reward_std,regression_s,bytes_up_per_round,bytes_down_per_round\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.1},{:.1}",
                r.fleet_size, r.runs, r.reward_mean, r.reward_std, r.regression_s, r.bytes_up_per_round, r.bytes_down_per_round
            );
        }
        if let Some(f) = self.time_fit {
            let _ = writeln!(s, "# regression_s fit: slope={:.6e} intercept={:.6e} r2={:.6}", f.slope, f.intercept, f.r_squared);
        }
        if let Some(f) = self.up_bytes_fit {
            let _ = writeln!(s, "# bytes_up fit: slope={:.3} intercept={:.3} r2={:.9}", f.slope, f.intercept, f.r_squared);
        }
        s
    }
}

/// Groups reports by fleet size and fits regression time and up-traffic
/// against it.
pub fn aggregate_scaling(reports: &[RunReport]) -> ScalingTable {
    let mut by_size: BTreeMap<usize, Vec<&RunReport>> = BTreeMap::new();
    for r in reports {
        by_size.entry(r.fleet_size).or_default().push(r);
    }
    let rows: Vec<ScalingRow> = by_size
        .into_iter()
        .map(|(fleet_size, rs)| {
            let finals: Vec<f64> = rs.iter().filter_map(|r| r.reward_summary().last().map(|c| c.mean)).collect();
            let n = finals.len().max(1) as f64;
            let mean = finals.iter().sum::<f64>() / n;
            let std = (finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            let per_round = |f: &dyn Fn(&RunReport) -> u64| {
                let rounds: usize = rs.iter().map(|r| r.traffic.rounds.len()).sum();
                if rounds == 0 {
                    0.0
                } else {
                    rs.iter().map(|r| f(r)).sum::<u64>() as f64 / rounds as f64
                }
            };
            ScalingRow {
                fleet_size,
                runs: rs.len(),
                reward_mean: mean,
                reward_std: std,
                regression_s: rs.iter().map(|r| r.mean_regression_s()).sum::<f64>() / rs.len() as f64,
                bytes_up_per_round: per_round(&|r| r.traffic.total_up()),
                bytes_down_per_round: per_round(&|r| r.traffic.total_down()),
            }
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.fleet_size as f64).collect();
    ScalingTable {
        time_fit: linear_fit(&xs, &rows.iter().map(|r| r.regression_s).collect::<Vec<_>>()),
        up_bytes_fit: linear_fit(&xs, &rows.iter().map(|r| r.bytes_up_per_round).collect::<Vec<_>>()),
        rows,
    }
}

/// Runs `base` (as a shared fleet) at each fleet size for every seed, with
/// one initial checkpoint per seed reused across sizes.
pub fn run_scaling(base: &ScenarioConfig, sizes: &[usize]) -> Result<(Vec<RunReport>, ScalingTable)> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::invalid("scaling needs positive fleet sizes"));
    }
    let mut cfg = base.clone();
    cfg.strategy = Strategy::Shared;
    cfg.regression_enabled = true;
    let (sets, _) = cfg.resolve_routes()?;
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let ckpt = build_initial_checkpoint(&cfg, &sets, seed)?;
        for &n in sizes {
            let mut c = cfg.clone();
            c.fleet_size = n;
            reports.push(run_seed(&c, seed, Some(&ckpt))?.report);
        }
    }
    let table = aggregate_scaling(&reports);
    Ok((reports, table))
}

fn header(reports: &[RunReport]) -> String {
    let seeds: Vec<String> = reports.iter().map(|r| r.seed.to_string()).collect();
    let (name, strategy) = reports
        .first()
        .map_or(("", ""), |r| (r.scenario.as_str(), r.strategy.as_str()));
    format!("# scenario={name} strategy={strategy} seeds={}\n", seeds.join(","))
}

pub fn metrics_csv(reports: &[RunReport]) -> String {
    let mut s = header(reports);
    s.push_str("seed,cycle,agent,reward_per_step,mpg,accel_rmse_m_s2,shifts_per_km,distance_m,fuel_g,collided,train_reward_per_step\n");
    for r in reports {
        for row in &r.rows {
            let m = &row.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{:.8},{:.6},{:.6},{:.6},{:.3},{:.3},{},{:.8}",
                r.seed,
                row.cycle,
                row.agent,
                m.mean_reward,
                m.mpg,
                m.accel_rmse_m_s2,
                m.shifts_per_km,
                m.distance_m,
                m.fuel_g,
                m.collided,
                row.train_reward_per_step
            );
        }
    }
    s
}

pub fn summary_csv(reports: &[RunReport]) -> String {
    let mut s = header(reports);
    s.push_str("seed,cycle,fleet_mean_reward,fleet_min_reward,fleet_max_reward,fleet_mean_mpg,fleet_mean_accel_rmse,fleet_mean_shifts_per_km\n");
    for r in reports {
        let reward = r.reward_summary();
        let mpg = r.summarize(|m| m.mpg);
        let rmse = r.summarize(|m| m.accel_rmse_m_s2);
        let shifts = r.summarize(|m| m.shifts_per_km);
        for i in 0..reward.len() {
            let _ = writeln!(
                s,
                "{},{},{:.8},{:.8},{:.8},{:.6},{:.6},{:.6}",
                r.seed, reward[i].cycle, reward[i].mean, reward[i].min, reward[i].max, mpg[i].mean, rmse[i].mean, shifts[i].mean
            );
        }
    }
    s
}

pub fn timing_csv(reports: &[RunReport]) -> String {
    let mut s = header(reports);
    s.push_str("seed,round,n_snapshots,sampling_s,advantage_s,loss_s,backprop_s,optimize_s,total_s\n");
    for r in reports {
        for (round, n, t) in &r.timing {
            let _ = writeln!(
                s,
                "{},{round},{n},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.seed,
                t.sampling_s,
                t.advantage_s,
                t.loss_s,
                t.backprop_s,
                t.optimize_s,
                t.total_s()
            );
        }
    }
    s
}

pub fn traffic_csv(reports: &[RunReport]) -> String {
    let mut s = header(reports);
    s.push_str("seed,round,bytes_up,bytes_down,control_bytes\n");
    for r in reports {
        for t in &r.traffic.rounds {
            let _ = writeln!(s, "{},{},{},{},{}", r.seed, t.round, t.bytes_up, t.bytes_down, t.control_bytes);
        }
    }
    s
}

/// Learning curve across all seeds and agents: mean line with a min–max
/// band. Each cycle's numbers are also stored as `data-*` attributes.
pub fn learning_curve_svg(reports: &[RunReport], title: &str, metric: impl Fn(&EpisodeMetrics) -> f64) -> String {
    let mut by_cycle: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for row in &r.rows {
            by_cycle.entry(row.cycle).or_default().push(metric(&row.metrics));
        }
    }
    let pts: Vec<(usize, f64, f64, f64)> = by_cycle
        .into_iter()
        .map(|(c, v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (c, lo, mean, hi)
        })
        .filter(|p| p.1.is_finite() && p.3.is_finite())
        .collect();
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n",
        w / 2.0
    );
    if !pts.is_empty() {
        let c_max = pts.iter().map(|p| p.0).max().unwrap_or(1).max(2) as f64;
        let c_min = pts.iter().map(|p| p.0).min().unwrap_or(1) as f64;
        let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.3).fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let x = |c: usize| pad + (c as f64 - c_min) / (c_max - c_min).max(1.0) * (w - 2.0 * pad);
        let y = |v: f64| h - pad - (v - lo) / span * (h - 2.0 * pad);
        let upper: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", x(p.0), y(p.3))).collect();
        let lower: Vec<String> = pts.iter().rev().map(|p| format!("{:.2},{:.2}", x(p.0), y(p.1))).collect();
        let _ = writeln!(
            s,
            "<polygon points=\"{} {}\" fill=\"#4a90d9\" fill-opacity=\"0.25\" stroke=\"none\"/>",
            upper.join(" "),
            lower.join(" ")
        );
        let mean: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", x(p.0), y(p.2))).collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f4e8c\" stroke-width=\"2\"/>", mean.join(" "));
        let _ = writeln!(
            s,
            "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{0}\" stroke=\"black\"/>",
            h - pad,
            w - pad
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">training route</text>",
            w / 2.0,
            h - 12.0
        );
        let _ = writeln!(s, "<text x=\"4\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{hi:.4}</text>", pad);
        let _ = writeln!(s, "<text x=\"4\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{lo:.4}</text>", h - pad);
        s.push_str("<g id=\"series\">\n");
        for p in &pts {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" data-cycle=\"{}\" data-lower=\"{:e}\" data-mean=\"{:e}\" data-upper=\"{:e}\"/>",
                x(p.0),
                y(p.2),
                p.0,
                p.1,
                p.2,
                p.3
            );
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

/// Writes metrics.csv, summary.csv, timing.csv, traffic.csv and one SVG
/// learning curve per metric into `out_dir`.
pub fn emit_outputs(reports: &[RunReport], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics_csv(reports))?;
    std::fs::write(out_dir.join("summary.csv"), summary_csv(reports))?;
    std::fs::write(out_dir.join("timing.csv"), timing_csv(reports))?;
    std::fs::write(out_dir.join("traffic.csv"), traffic_csv(reports))?;
    let plots: [(&str, &str, fn(&EpisodeMetrics) -> f64); 4] = [
        ("reward.svg", "Average reward per step", |m| m.mean_reward),
        ("mpg.svg", "Fuel economy (MPG)", |m| m.mpg),
        ("accel_rmse.svg", "Acceleration RMSE (m/s²)", |m| m.accel_rmse_m_s2),
        ("shifts.svg", "Gear shifts per km", |m| m.shifts_per_km),
    ];
    for (file, title, f) in plots {
        std::fs::write(out_dir.join(file), learning_curve_svg(reports, title, f))?;
    }
    Ok(())
}

/// Writes `agent{k}_actor.flnn`, `agent{k}_critic.flnn` and a key=value
/// sidecar `agent{k}.meta`.
pub fn save_agent_checkpoint(agent: &Agent, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let k = agent.id;
    std::fs::write(dir.join(format!("agent{k}_actor.flnn")), agent.actor().to_checkpoint())?;
    std::fs::write(dir.join(format!("agent{k}_critic.flnn")), agent.learner.critic.to_checkpoint())?;
    let config_hash = crc32fast::hash(format!("{:?}", agent.config()).as_bytes());
    let rng_line = |name: &str, r: &ChaCha8Rng| {
        let seed: String = r.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        format!("{name}_seed = {seed}\n{name}_stream = {}\n{name}_word_pos = {}\n", r.get_stream(), r.get_word_pos())
    };
    let meta = format!(
        "agent = {k}\nconfig_hash = {config_hash:08x}\ncycles = {}\ngroup_version = {}\n{}{}{}",
        agent.learner.cycles,
        agent.group_version().map_or("none".into(), |v| v.to_string()),
        rng_line("act_rng", &agent.act_rng),
        rng_line("learn_rng", &agent.learner.rng),
        rng_line("snapshot_rng", &agent.snapshot_rng),
    );
    std::fs::write(dir.join(format!("agent{k}.meta")), meta)?;
    Ok(())
}

/// Preset for the scenarios in `configs/`: `train` is a `;`-separated list
/// of route sets.
pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let mut c = ScenarioConfig::desk();
    c.name = name.to_string();
    match name {
        "scenario_i" => {
            c.eval_route = EvalRouteSpec::Mix(vec![
                (RouteSource::Builtin(RouteLabel::Suburban), 0.34),
                (RouteSource::Builtin(RouteLabel::Suburban), 0.33),
                (RouteSource::Builtin(RouteLabel::Suburban), 0.33),
            ]);
        }
        "scenario_ii" => {
            c.fleet_size = 8;
        }
        "scenario_iii" => {
            c.fleet_size = 6;
            c.train_sets = [RouteLabel::Urban, RouteLabel::Suburban, RouteLabel::Highway]
                .into_iter()
                .map(RouteSource::Builtin)
                .collect();
            c.eval_route = EvalRouteSpec::Mix(vec![
                (RouteSource::Builtin(RouteLabel::Suburban), 0.45),
                (RouteSource::Builtin(RouteLabel::Urban), 0.10),
                (RouteSource::Builtin(RouteLabel::Highway), 0.45),
            ]);
        }
        other => return Err(Error::invalid(format!("unknown preset {other:?}"))),
    }
    Ok(c)
}
