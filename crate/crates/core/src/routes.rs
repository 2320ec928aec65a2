//! Drive cycles: representation, Markov-chain synthesis from a seed cycle,
//! randomized episode sampling and evaluation-route composition.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::driver::IdmParams;
use crate::dynamics::{MAX_MASS_KG, MIN_MASS_KG};
use crate::error::{Error, Result};

/// Physical plausibility bound on route acceleration (m/s²).
pub const MAX_ROUTE_ACCEL_M_S2: f64 = 4.0;
/// Upper bound on a single episode's duration (s).
pub const MAX_EPISODE_DURATION_S: f64 = 10_000.0;
/// Length of the linear speed blend at evaluation-route junctions (s).
pub const JUNCTION_BLEND_S: f64 = 5.0;
/// Amplitude of the multiplicative speed noise applied per episode.
pub const SPEED_NOISE_AMPLITUDE: f64 = 0.05;

const VELOCITY_BINS: usize = 10;
const ACCEL_BINS: usize = 7;
const ACCEL_EDGES: [f64; ACCEL_BINS - 1] = [-1.0, -0.5, -0.1, 0.1, 0.5, 1.0];
const MEAN_SPEED_TOLERANCE: f64 = 0.15;
const MAX_SYNTH_ATTEMPTS: usize = 500;
const ACCEL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RouteLabel {
    Urban,
    Suburban,
    Highway,
    Mixed,
    Custom,
}

impl RouteLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            RouteLabel::Urban => "urban",
            RouteLabel::Suburban => "suburban",
            RouteLabel::Highway => "highway",
            RouteLabel::Mixed => "mixed",
            RouteLabel::Custom => "custom",
        }
    }
}

impl fmt::Display for RouteLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RouteLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "urban" => RouteLabel::Urban,
            "suburban" => RouteLabel::Suburban,
            "highway" => RouteLabel::Highway,
            "mixed" => RouteLabel::Mixed,
            "custom" => RouteLabel::Custom,
            other => return Err(Error::invalid(format!("unknown route label {other:?}"))),
        })
    }
}

/// A velocity profile sampled every `dt_s` seconds. Sample `k` covers
/// `[k·dt, (k+1)·dt)`, so the duration is `len · dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub dt_s: f64,
    pub speeds_m_s: Vec<f64>,
    pub label: RouteLabel,
}

impl Route {
    pub fn new(dt_s: f64, speeds_m_s: Vec<f64>, label: RouteLabel) -> Result<Self> {
        let r = Self { dt_s, speeds_m_s, label };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_s.is_finite() && self.dt_s > 0.0) {
            return Err(Error::invalid(format!("route dt must be positive, got {}", self.dt_s)));
        }
        if self.speeds_m_s.is_empty() {
            return Err(Error::invalid("route has no samples"));
        }
        if let Some(v) = self.speeds_m_s.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::invalid(format!("route speed {v} is negative or non-finite")));
        }
        if let Some(a) = self.max_abs_accel().filter(|a| *a > MAX_ROUTE_ACCEL_M_S2 + ACCEL_TOL) {
            return Err(Error::invalid(format!("route acceleration {a:.3} m/s² exceeds {MAX_ROUTE_ACCEL_M_S2}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.speeds_m_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds_m_s.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.speeds_m_s.len() as f64 * self.dt_s
    }

    pub fn mean_speed(&self) -> f64 {
        self.speeds_m_s.iter().sum::<f64>() / self.speeds_m_s.len() as f64
    }

    pub fn max_speed(&self) -> f64 {
        self.speeds_m_s.iter().cloned().fold(0.0, f64::max)
    }

    pub fn min_speed(&self) -> f64 {
        self.speeds_m_s.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_accel(&self) -> Option<f64> {
        self.speeds_m_s
            .windows(2)
            .map(|w| (w[1] - w[0]).abs() / self.dt_s)
            .fold(None, |acc, a| Some(acc.map_or(a, |m: f64| m.max(a))))
    }

    /// Lead-vehicle speed at time `t_s`, linearly interpolated and looping
    /// back to the start after the last sample.
    pub fn speed_at(&self, t_s: f64) -> f64 {
        let n = self.speeds_m_s.len();
        let x = (t_s / self.dt_s).max(0.0);
        let i = x.floor();
        let frac = x - i;
        let i = (i as usize) % n;
        let j = (i + 1) % n;
        self.speeds_m_s[i] + frac * (self.speeds_m_s[j] - self.speeds_m_s[i])
    }

    /// Parses the plain-text route format: `dt=<real>` then one speed per line.
    pub fn parse(text: &str, label: RouteLabel) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .enumerate()
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (_, header) = lines.next().ok_or_else(|| Error::invalid("empty route file"))?;
        let dt = header
            .strip_prefix("dt=")
            .ok_or_else(|| Error::invalid("route file must start with dt=<real>"))?
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::invalid("cannot parse route dt"))?;
        let speeds = lines
            .map(|(i, l)| {
                l.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("route line {}: cannot parse {l:?}", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dt, speeds, label)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dt={}\n", self.dt_s);
        for v in &self.speeds_m_s {
            let _ = writeln!(out, "{v}");
        }
        out
    }

    /// Built-in representative profile standing in for the public drive-cycle
    /// library: `urban`, `suburban` or `highway`.
    pub fn representative(label: RouteLabel) -> Result<Self> {
        let text = match label {
            RouteLabel::Urban => include_str!("../data/urban.route"),
            RouteLabel::Suburban => include_str!("../data/suburban.route"),
            RouteLabel::Highway => include_str!("../data/highway.route"),
            other => return Err(Error::invalid(format!("no representative profile for {other}"))),
        };
        Self::parse(text, label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteSet {
    pub routes: Vec<Route>,
    pub label: RouteLabel,
}

impl RouteSet {
    pub fn new(routes: Vec<Route>, label: RouteLabel) -> Result<Self> {
        if routes.is_empty() {
            return Err(Error::invalid("route set is empty"));
        }
        Ok(Self { routes, label })
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }
}

/// Everything that is randomized per training episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    /// Lead-vehicle profile, already perturbed by the speed noise field.
    pub route: Route,
    pub mass_kg: f64,
    pub idm: IdmParams,
    pub speed_noise_seed: u64,
    pub duration_s: f64,
    /// Initial bumper-to-bumper gap to the lead vehicle (m).
    pub initial_gap_m: f64,
}

impl EpisodeConfig {
    pub const DEFAULT_INITIAL_GAP_M: f64 = 15.0;

    /// Deterministic episode on an unperturbed route, used for evaluation.
    pub fn nominal(route: Route, mass_kg: f64) -> Self {
        let idm = IdmParams {
            desired_speed_m_s: IdmParams::desired_speed_for_route(route.max_speed()).max(1.0),
            ..IdmParams::default()
        };
        let duration_s = route.duration_s();
        Self {
            route,
            mass_kg,
            idm,
            speed_noise_seed: 0,
            duration_s,
            initial_gap_m: Self::DEFAULT_INITIAL_GAP_M,
        }
    }

    pub fn with_duration(mut self, duration_s: f64) -> Self {
        self.duration_s = duration_s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.route.validate()?;
        self.idm.validate()?;
        if !(self.duration_s >= 0.0 && self.duration_s <= MAX_EPISODE_DURATION_S) {
            return Err(Error::invalid(format!(
                "episode duration {} outside [0, {MAX_EPISODE_DURATION_S}] s",
                self.duration_s
            )));
        }
        if !(MIN_MASS_KG..=MAX_MASS_KG).contains(&self.mass_kg) {
            return Err(Error::invalid(format!("episode mass {} out of range", self.mass_kg)));
        }
        if !(self.initial_gap_m > 0.0) {
            return Err(Error::invalid("initial gap must be positive"));
        }
        Ok(())
    }
}

fn velocity_bin(v: f64, v_max: f64) -> usize {
    ((v / v_max * VELOCITY_BINS as f64) as usize).min(VELOCITY_BINS - 1)
}

fn accel_bin(a: f64) -> usize {
    ACCEL_EDGES.partition_point(|e| *e <= a)
}

fn cluster(v: f64, a: f64, v_max: f64) -> usize {
    velocity_bin(v, v_max) * ACCEL_BINS + accel_bin(a)
}

/// First-order Markov chain over (velocity, acceleration) clusters with the
/// empirical accelerations observed in each cluster as emissions.
struct ClusterChain {
    v_max: f64,
    dt: f64,
    transitions: Vec<Vec<u32>>,
    emissions: Vec<Vec<f64>>,
}

impl ClusterChain {
    fn fit(seed: &Route) -> Self {
        let n_states = VELOCITY_BINS * ACCEL_BINS;
        let v_max = seed.max_speed();
        let dt = seed.dt_s;
        let v = &seed.speeds_m_s;
        let accel: Vec<f64> = v.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
        let states: Vec<usize> = accel.iter().enumerate().map(|(k, a)| cluster(v[k], *a, v_max)).collect();
        let mut transitions = vec![vec![0u32; n_states]; n_states];
        let mut emissions = vec![Vec::new(); n_states];
        for (k, s) in states.iter().enumerate() {
            emissions[*s].push(accel[k]);
            if let Some(next) = states.get(k + 1) {
                transitions[*s][*next] += 1;
            }
        }
        Self {
            v_max,
            dt,
            transitions,
            emissions,
        }
    }

    fn observed(&self, s: usize) -> bool {
        !self.emissions[s].is_empty()
    }

    /// Next cluster consistent with velocity bin `vb`: drawn from the current
    /// row restricted to that bin, else from the bin's marginal occupancy,
    /// else from the nearest occupied bin.
    fn next_state(&self, current: usize, vb: usize, rng: &mut ChaCha8Rng) -> usize {
        let row = &self.transitions[current];
        let in_bin = |b: usize| (b * ACCEL_BINS)..((b + 1) * ACCEL_BINS);
        let total: u32 = in_bin(vb).map(|s| row[s]).sum();
        if total > 0 {
            return weighted_pick(in_bin(vb).map(|s| (s, row[s] as f64)), total as f64, rng);
        }
        for dist in 0..VELOCITY_BINS {
            for b in [vb.wrapping_sub(dist), vb + dist] {
                if b >= VELOCITY_BINS {
                    continue;
                }
                let weights: Vec<(usize, f64)> = in_bin(b).map(|s| (s, self.emissions[s].len() as f64)).collect();
                let sum: f64 = weights.iter().map(|w| w.1).sum();
                if sum > 0.0 {
                    return weighted_pick(weights.into_iter(), sum, rng);
                }
            }
        }
        current
    }

    fn sample(&self, len: usize, start: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut speeds = Vec::with_capacity(len);
        let mut v = 0.0f64;
        let mut state = start;
        speeds.push(v);
        while speeds.len() < len {
            let remaining = (len - speeds.len()) as f64 * self.dt;
            let pool = &self.emissions[state];
            let mut a = if pool.is_empty() { 0.0 } else { pool[rng.random_range(0..pool.len())] };
            // finish at a standstill so the profile can loop
            let stop_decel = 1.0;
            if v > stop_decel * (remaining - self.dt) {
                a = a.min(-(v - stop_decel * (remaining - self.dt)).max(0.0) / self.dt).max(-v / self.dt);
            }
            a = a.clamp(-MAX_ROUTE_ACCEL_M_S2, MAX_ROUTE_ACCEL_M_S2);
            let next_v = (v + a * self.dt).clamp(0.0, self.v_max);
            speeds.push(next_v);
            let vb = velocity_bin(next_v, self.v_max);
            state = self.next_state(state, vb, rng);
            if !self.observed(state) {
                state = self.next_state(state, vb, rng);
            }
            v = next_v;
        }
        speeds
    }
}

fn weighted_pick(items: impl Iterator<Item = (usize, f64)>, total: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut target = rng.random::<f64>() * total;
    let mut last = 0;
    for (s, w) in items {
        if w <= 0.0 {
            continue;
        }
        last = s;
        if target < w {
            return s;
        }
        target -= w;
    }
    last
}

/// Synthesizes `n` statistically similar profiles from `seed_route`. Each
/// has the seed's duration, stays within the seed's speed range and has a
/// mean speed within ±15% of the seed's.
pub fn synthesize_routes(seed_route: &Route, n: usize, rng_seed: u64) -> Result<RouteSet> {
    seed_route.validate()?;
    if n == 0 {
        return Err(Error::invalid("must synthesize at least one route"));
    }
    if seed_route.len() < 100 {
        return Err(Error::Synthesis(format!(
            "seed route has {} samples, need at least 100",
            seed_route.len()
        )));
    }
    if seed_route.max_speed() - seed_route.min_speed() < 1e-9 {
        return Err(Error::Synthesis("seed route has constant speed".into()));
    }
    let chain = ClusterChain::fit(seed_route);
    let seed_accel0 = (seed_route.speeds_m_s[1] - seed_route.speeds_m_s[0]) / seed_route.dt_s;
    let start = cluster(seed_route.speeds_m_s[0], seed_accel0, chain.v_max);
    let target_mean = seed_route.mean_speed();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut routes = Vec::with_capacity(n);
    for i in 0..n {
        let mut accepted = None;
        for _ in 0..MAX_SYNTH_ATTEMPTS {
            let speeds = chain.sample(seed_route.len(), start, &mut rng);
            let mean = speeds.iter().sum::<f64>() / speeds.len() as f64;
            if (mean - target_mean).abs() <= MEAN_SPEED_TOLERANCE * target_mean {
                accepted = Some(speeds);
                break;
            }
        }
        let speeds = accepted.ok_or_else(|| {
            Error::Synthesis(format!("route {i}: mean speed bound not met in {MAX_SYNTH_ATTEMPTS} attempts"))
        })?;
        routes.push(Route::new(seed_route.dt_s, speeds, seed_route.label)?);
    }
    RouteSet::new(routes, seed_route.label)
}

/// Draws one randomized training episode from `set`.
pub fn sample_episode(set: &RouteSet, rng_seed: u64) -> Result<EpisodeConfig> {
    sample_episode_with(set, &EpisodeSampling::default(), rng_seed)
}

/// Ranges from which per-episode vehicle and driver parameters are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSampling {
    pub mass_kg: (f64, f64),
    pub time_headway_s: (f64, f64),
    pub min_gap_m: (f64, f64),
    /// Source of the fixed IDM parameters (A_max, b, δ).
    pub idm: IdmParams,
}

impl Default for EpisodeSampling {
    fn default() -> Self {
        Self {
            mass_kg: (MIN_MASS_KG, MAX_MASS_KG),
            time_headway_s: (3.0, 4.0),
            min_gap_m: (5.0, 7.0),
            idm: IdmParams::default(),
        }
    }
}

impl EpisodeSampling {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("mass", self.mass_kg),
            ("time headway", self.time_headway_s),
            ("min gap", self.min_gap_m),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return Err(Error::invalid(format!("{name} range [{lo}, {hi}] is invalid")));
            }
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Samples one episode: a uniformly chosen route with speed noise, a vehicle
/// mass and the driver's headway and standstill gap. Deterministic in
/// `rng_seed`.
pub fn sample_episode_with(set: &RouteSet, ranges: &EpisodeSampling, rng_seed: u64) -> Result<EpisodeConfig> {
    if set.is_empty() {
        return Err(Error::invalid("route set is empty"));
    }
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let base = &set.routes[rng.random_range(0..set.len())];
    let mass_kg = draw(&mut rng, ranges.mass_kg);
    let time_headway_s = draw(&mut rng, ranges.time_headway_s);
    let min_gap_m = draw(&mut rng, ranges.min_gap_m);
    let speed_noise_seed = rng.random::<u64>();
    let route = apply_speed_noise(base, speed_noise_seed)?;
    let idm = IdmParams {
        desired_speed_m_s: IdmParams::desired_speed_for_route(route.max_speed()).max(1.0),
        time_headway_s,
        min_gap_m,
        ..ranges.idm
    };
    let duration_s = route.duration_s().min(MAX_EPISODE_DURATION_S);
    Ok(EpisodeConfig {
        route,
        mass_kg,
        idm,
        speed_noise_seed,
        duration_s,
        initial_gap_m: EpisodeConfig::DEFAULT_INITIAL_GAP_M,
    })
}

/// Multiplies the profile by a smooth noise field in `(0.95, 1.05)`: an AR(1)
/// low-pass of white noise squashed through `tanh`.
pub fn apply_speed_noise(route: &Route, seed: u64) -> Result<Route> {
    const CORRELATION: f64 = 0.98;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state: f64 = rng.sample(StandardNormal);
    let innovation = (1.0 - CORRELATION * CORRELATION).sqrt();
    let mut speeds = Vec::with_capacity(route.len());
    for v in &route.speeds_m_s {
        let w: f64 = rng.sample(StandardNormal);
        state = CORRELATION * state + innovation * w;
        speeds.push(v * (1.0 + SPEED_NOISE_AMPLITUDE * (0.5 * state).tanh()));
    }
    rate_limit(&mut speeds, route.dt_s);
    Route::new(route.dt_s, speeds, route.label)
}

/// Forward pass enforcing the route acceleration bound and non-negativity.
fn rate_limit(speeds: &mut [f64], dt: f64) {
    let step = MAX_ROUTE_ACCEL_M_S2 * dt;
    for k in 1..speeds.len() {
        let prev = speeds[k - 1];
        speeds[k] = speeds[k].clamp((prev - step).max(0.0), prev + step);
    }
}

/// Concatenates the leading `fraction · duration` slice of each route, in
/// order, with a 5 s linear speed blend at every junction.
pub fn compose_evaluation_route(parts: &[(Route, f64)]) -> Result<Route> {
    let first = parts.first().ok_or_else(|| Error::invalid("no route parts"))?;
    let dt = first.0.dt_s;
    if parts.iter().any(|(_, f)| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::invalid("route fractions must be positive"));
    }
    let total: f64 = parts.iter().map(|(_, f)| f).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("route fractions sum to {total}, expected 1")));
    }
    if parts.iter().any(|(r, _)| (r.dt_s - dt).abs() > 1e-12) {
        return Err(Error::invalid("all route parts must share one sample period"));
    }
    let blend_n = (JUNCTION_BLEND_S / dt).round() as usize;
    let mut speeds: Vec<f64> = Vec::new();
    for (route, fraction) in parts {
        route.validate()?;
        let take = ((route.len() as f64) * fraction).round() as usize;
        if take == 0 {
            return Err(Error::invalid("route fraction selects an empty slice"));
        }
        let slice = &route.speeds_m_s[..take.min(route.len())];
        match speeds.last().copied() {
            None => speeds.extend_from_slice(slice),
            Some(junction) => {
                for (k, v) in slice.iter().enumerate() {
                    if k < blend_n {
                        let w = k as f64 / blend_n as f64;
                        speeds.push((1.0 - w) * junction + w * v);
                    } else {
                        speeds.push(*v);
                    }
                }
            }
        }
    }
    rate_limit(&mut speeds, dt);
    let label = if parts.len() == 1 { first.0.label } else { RouteLabel::Mixed };
    Route::new(dt, speeds, label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_route() -> Route {
        let mut v = Vec::new();
        for k in 0..200 {
            let t = k as f64;
            v.push(10.0 + 8.0 * (t / 15.0).sin());
        }
        Route::new(1.0, v, RouteLabel::Custom).unwrap()
    }

    #[test]
    fn representative_profiles_load() {
        for label in [RouteLabel::Urban, RouteLabel::Suburban, RouteLabel::Highway] {
            let r = Route::representative(label).unwrap();
            assert_eq!(r.speeds_m_s[0], 0.0);
            assert_eq!(*r.speeds_m_s.last().unwrap(), 0.0);
            assert!(r.len() >= 1000);
        }
        let u = Route::representative(RouteLabel::Urban).unwrap().mean_speed();
        let s = Route::representative(RouteLabel::Suburban).unwrap().mean_speed();
        let h = Route::representative(RouteLabel::Highway).unwrap().mean_speed();
        assert!(u < s && s < h);
        assert!(Route::representative(RouteLabel::Mixed).is_err());
    }

    #[test]
    fn route_invariants_enforced() {
        assert!(Route::new(1.0, vec![0.0, 5.0], RouteLabel::Custom).is_err());
        assert!(Route::new(1.0, vec![0.0, -1.0], RouteLabel::Custom).is_err());
        assert!(Route::new(0.0, vec![0.0], RouteLabel::Custom).is_err());
        assert!(Route::parse("0.5\n1.0\n", RouteLabel::Custom).is_err());
        let r = Route::parse("dt=0.5\n0\n1\n2\n", RouteLabel::Custom).unwrap();
        assert_eq!(r.duration_s(), 1.5);
        assert_eq!(Route::parse(&r.to_text(), RouteLabel::Custom).unwrap(), r);
    }

    #[test]
    fn speed_at_interpolates_and_loops() {
        let r = Route::new(1.0, vec![0.0, 2.0, 4.0, 2.0], RouteLabel::Custom).unwrap();
        assert_eq!(r.speed_at(0.5), 1.0);
        assert_eq!(r.speed_at(3.5), 1.0);
        assert_eq!(r.speed_at(5.0), 2.0);
    }

    #[test]
    fn synthesis_single_route_respects_bounds() {
        let seed = ramp_route();
        let set = synthesize_routes(&seed, 1, 3).unwrap();
        assert_eq!(set.len(), 1);
        let r = &set.routes[0];
        assert_eq!(r.len(), seed.len());
        assert!((r.mean_speed() - seed.mean_speed()).abs() <= 0.15 * seed.mean_speed());
        assert!(r.max_speed() <= seed.max_speed() + 1e-12);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let seed = Route::representative(RouteLabel::Urban).unwrap();
        assert_eq!(synthesize_routes(&seed, 3, 11).unwrap(), synthesize_routes(&seed, 3, 11).unwrap());
        assert_ne!(synthesize_routes(&seed, 1, 11).unwrap(), synthesize_routes(&seed, 1, 12).unwrap());
    }

    #[test]
    fn synthesis_rejects_degenerate_seeds() {
        let flat = Route::new(1.0, vec![10.0; 200], RouteLabel::Custom).unwrap();
        assert!(matches!(synthesize_routes(&flat, 2, 0), Err(Error::Synthesis(_))));
        let short = Route::new(1.0, (0..50).map(|k| k as f64 * 0.1).collect(), RouteLabel::Custom).unwrap();
        assert!(matches!(synthesize_routes(&short, 2, 0), Err(Error::Synthesis(_))));
        assert!(synthesize_routes(&ramp_route(), 0, 0).is_err());
    }

    #[test]
    fn sample_episode_ranges_and_determinism() {
        let seed = Route::representative(RouteLabel::Suburban).unwrap();
        let set = RouteSet::new(vec![seed.clone()], RouteLabel::Suburban).unwrap();
        for s in 0..50 {
            let ep = sample_episode(&set, s).unwrap();
            ep.validate().unwrap();
            assert!((8000.0..=24000.0).contains(&ep.mass_kg));
            assert!((3.0..=4.0).contains(&ep.idm.time_headway_s));
            assert!((5.0..=7.0).contains(&ep.idm.min_gap_m));
            for (noisy, base) in ep.route.speeds_m_s.iter().zip(&seed.speeds_m_s) {
                assert!(*noisy <= base * 1.05 + 1e-9);
            }
        }
        assert_eq!(sample_episode(&set, 9).unwrap(), sample_episode(&set, 9).unwrap());
    }

    #[test]
    fn compose_identity_and_errors() {
        let r = Route::representative(RouteLabel::Urban).unwrap();
        assert_eq!(compose_evaluation_route(&[(r.clone(), 1.0)]).unwrap(), r);
        assert!(compose_evaluation_route(&[(r.clone(), 0.5), (r.clone(), 0.4)]).is_err());
        assert!(compose_evaluation_route(&[(r.clone(), 1.2), (r.clone(), -0.2)]).is_err());
        assert!(compose_evaluation_route(&[]).is_err());
    }

    #[test]
    fn label_round_trip() {
        for l in [RouteLabel::Urban, RouteLabel::Suburban, RouteLabel::Highway, RouteLabel::Mixed, RouteLabel::Custom] {
            assert_eq!(l.as_str().parse::<RouteLabel>().unwrap(), l);
        }
    }
}
