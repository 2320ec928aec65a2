//! Longitudinal vehicle, driveline, brake-split and fuel-rate models for a
//! conventional diesel truck with a 10-speed automated transmission.
//!
//! Resistive forces oppose motion:
//!
//! ```text
//! M_eff · dV/dt = T_t / r_w − R_r − R_a − R_g
//! R_r = W C_r cos ψ      (zero at standstill)
//! R_a = ½ ρ C_d A_f V²
//! R_g = W sin ψ
//! ```
//!
//! Integration is explicit Euler with the MDP step as the time step.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Standard gravity (m/s²).
pub const GRAVITY_M_S2: f64 = 9.81;
/// Ratio of effective (rotating-inertia inclusive) mass to vehicle mass.
pub const ROTATING_MASS_FACTOR: f64 = 1.05;
pub const NUM_GEARS: u8 = 10;
/// Fuel-rate ceiling (g/s).
pub const MAX_FUEL_RATE_G_S: f64 = 18.0;
/// Wheel-torque command ceiling (Nm).
pub const MAX_TRACTION_TORQUE_NM: f64 = 18_000.0;
pub const MIN_MASS_KG: f64 = 8_000.0;
pub const MAX_MASS_KG: f64 = 24_000.0;
/// Lower heating value of diesel (J/g), used by the synthetic fuel map.
const DIESEL_LHV_J_G: f64 = 42_600.0;

const RPM: f64 = std::f64::consts::PI / 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleParams {
    /// Vehicle mass (kg); weight is `mass · g`, effective mass `1.05 · mass`.
    pub mass_kg: f64,
    pub frontal_area_m2: f64,
    pub wheel_radius_m: f64,
    pub c_rolling: f64,
    pub c_drag: f64,
    pub air_density_kg_m3: f64,
    pub final_drive_ratio: f64,
    pub final_drive_eff: f64,
    /// Transmission ratios, first gear first, strictly decreasing.
    pub gear_ratios: [f64; NUM_GEARS as usize],
    pub max_fuel_rate_g_s: f64,
    pub max_traction_torque_nm: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass_kg: 12_000.0,
            frontal_area_m2: 7.71,
            wheel_radius_m: 0.498,
            c_rolling: 0.015,
            c_drag: 0.8,
            air_density_kg_m3: 1.2,
            final_drive_ratio: 2.64,
            final_drive_eff: 0.937,
            gear_ratios: [12.0, 8.81, 6.47, 4.75, 3.49, 2.56, 1.88, 1.38, 1.02, 0.75],
            max_fuel_rate_g_s: MAX_FUEL_RATE_G_S,
            max_traction_torque_nm: MAX_TRACTION_TORQUE_NM,
        }
    }
}

impl VehicleParams {
    pub fn with_mass(mut self, mass_kg: f64) -> Self {
        self.mass_kg = mass_kg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("mass_kg", self.mass_kg),
            ("frontal_area_m2", self.frontal_area_m2),
            ("wheel_radius_m", self.wheel_radius_m),
            ("c_rolling", self.c_rolling),
            ("c_drag", self.c_drag),
            ("air_density_kg_m3", self.air_density_kg_m3),
            ("final_drive_ratio", self.final_drive_ratio),
            ("final_drive_eff", self.final_drive_eff),
            ("max_fuel_rate_g_s", self.max_fuel_rate_g_s),
            ("max_traction_torque_nm", self.max_traction_torque_nm),
        ];
        for (name, v) in positives {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(MIN_MASS_KG..=MAX_MASS_KG).contains(&self.mass_kg) {
            return Err(Error::invalid(format!(
                "mass {} kg outside [{MIN_MASS_KG}, {MAX_MASS_KG}]",
                self.mass_kg
            )));
        }
        if self.gear_ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::invalid("gear ratios must be positive"));
        }
        if self.gear_ratios.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("gear ratios must be strictly decreasing"));
        }
        Ok(())
    }

    pub fn weight_n(&self) -> f64 {
        self.mass_kg * GRAVITY_M_S2
    }

    pub fn effective_mass_kg(&self) -> f64 {
        ROTATING_MASS_FACTOR * self.mass_kg
    }

    /// Transmission ratio for a 1-based gear index.
    pub fn gear_ratio(&self, gear_index: u8) -> Result<f64> {
        check_gear(gear_index)?;
        Ok(self.gear_ratios[gear_index as usize - 1])
    }

    /// Transmission × final-drive ratio.
    pub fn overall_ratio(&self, gear_index: u8) -> Result<f64> {
        Ok(self.gear_ratio(gear_index)? * self.final_drive_ratio)
    }

    pub fn rolling_resistance_n(&self, velocity_m_s: f64, grade_rad: f64) -> f64 {
        if velocity_m_s > 0.0 {
            self.weight_n() * self.c_rolling * grade_rad.cos()
        } else {
            0.0
        }
    }

    pub fn aero_drag_n(&self, velocity_m_s: f64) -> f64 {
        0.5 * self.air_density_kg_m3 * self.c_drag * self.frontal_area_m2 * velocity_m_s * velocity_m_s
    }

    pub fn grade_force_n(&self, grade_rad: f64) -> f64 {
        self.weight_n() * grade_rad.sin()
    }
}

pub(crate) fn check_gear(gear_index: u8) -> Result<()> {
    if (1..=NUM_GEARS).contains(&gear_index) {
        Ok(())
    } else {
        Err(Error::invalid(format!("gear index {gear_index} outside 1..={NUM_GEARS}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub velocity_m_s: f64,
    pub position_m: f64,
    /// 1-based gear index.
    pub gear_index: u8,
    pub accel_m_s2: f64,
    pub engine_speed_rad_s: f64,
    pub engine_torque_nm: f64,
    pub fuel_rate_g_s: f64,
}

impl VehicleState {
    pub fn at_rest(gear_index: u8, engine: &EngineSpec) -> Self {
        Self {
            velocity_m_s: 0.0,
            position_m: 0.0,
            gear_index,
            accel_m_s2: 0.0,
            engine_speed_rad_s: engine.idle_speed_rad_s,
            engine_torque_nm: 0.0,
            fuel_rate_g_s: 0.0,
        }
    }

    fn check(&self) -> Result<()> {
        let fields = [
            self.velocity_m_s,
            self.position_m,
            self.accel_m_s2,
            self.engine_speed_rad_s,
            self.engine_torque_nm,
            self.fuel_rate_g_s,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vehicle state"));
        }
        if self.velocity_m_s < 0.0 {
            return Err(Error::invalid("negative velocity"));
        }
        check_gear(self.gear_index)
    }
}

/// Engine torque limits. The full-load curve is piecewise linear over engine speed.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineSpec {
    /// Breakpoints of the full-load curve (rad/s), ascending.
    pub curve_speed_rad_s: Vec<f64>,
    /// Full-load torque at each breakpoint (Nm).
    pub curve_torque_nm: Vec<f64>,
    /// Magnitude of the largest engine braking torque (Nm, positive).
    pub max_engine_brake_torque_nm: f64,
    pub idle_speed_rad_s: f64,
    pub max_speed_rad_s: f64,
}

impl Default for EngineSpec {
    /// Synthetic 2500 Nm heavy-duty diesel: flat torque to 1200 rpm, constant
    /// power above that up to the 2100 rpm governor.
    fn default() -> Self {
        let idle = 600.0 * RPM;
        let max = 2100.0 * RPM;
        let corner = 1200.0 * RPM;
        let peak = 2500.0;
        let n = 16;
        let mut speeds = Vec::with_capacity(n);
        let mut torques = Vec::with_capacity(n);
        for k in 0..n {
            let w = idle + (max - idle) * k as f64 / (n - 1) as f64;
            speeds.push(w);
            torques.push(if w <= corner { peak } else { peak * corner / w });
        }
        Self {
            curve_speed_rad_s: speeds,
            curve_torque_nm: torques,
            max_engine_brake_torque_nm: 1_200.0,
            idle_speed_rad_s: idle,
            max_speed_rad_s: max,
        }
    }
}

impl EngineSpec {
    pub fn validate(&self) -> Result<()> {
        if self.curve_speed_rad_s.len() < 2 || self.curve_speed_rad_s.len() != self.curve_torque_nm.len() {
            return Err(Error::invalid("engine curve needs ≥2 matching breakpoints"));
        }
        if !strictly_ascending(&self.curve_speed_rad_s) {
            return Err(Error::invalid("engine curve speeds must be strictly ascending"));
        }
        if self.curve_torque_nm.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::invalid("full-load torque must be non-negative"));
        }
        if !(self.idle_speed_rad_s > 0.0 && self.idle_speed_rad_s < self.max_speed_rad_s) {
            return Err(Error::invalid("idle speed must be positive and below max speed"));
        }
        if !(self.max_engine_brake_torque_nm >= 0.0) {
            return Err(Error::invalid("max engine brake torque must be non-negative"));
        }
        Ok(())
    }

    /// Full-load torque at `speed` (Nm), clamped to the curve ends.
    pub fn max_torque_nm(&self, speed_rad_s: f64) -> f64 {
        interp1(&self.curve_speed_rad_s, &self.curve_torque_nm, speed_rad_s)
    }

    /// Text format: `<n_points> <max_engine_brake_nm> <idle_rad_s> <max_rad_s>`
    /// followed by `n_points` lines of `<speed_rad_s> <torque_nm>`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = data_lines(text);
        let header = rows.next().ok_or_else(|| Error::invalid("empty engine spec"))?;
        let header = parse_reals(header.1, header.0)?;
        if header.len() != 4 {
            return Err(Error::invalid("engine header needs 4 fields"));
        }
        let n = header[0] as usize;
        let mut speeds = Vec::with_capacity(n);
        let mut torques = Vec::with_capacity(n);
        for _ in 0..n {
            let (line_no, line) = rows.next().ok_or_else(|| Error::invalid("engine curve truncated"))?;
            let vals = parse_reals(line, line_no)?;
            if vals.len() != 2 {
                return Err(Error::invalid(format!("line {line_no}: expected speed and torque")));
            }
            speeds.push(vals[0]);
            torques.push(vals[1]);
        }
        let spec = Self {
            curve_speed_rad_s: speeds,
            curve_torque_nm: torques,
            max_engine_brake_torque_nm: header[1],
            idle_speed_rad_s: header[2],
            max_speed_rad_s: header[3],
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# engine full-load curve: n brake_nm idle_rad_s max_rad_s, then speed torque\n");
        let _ = writeln!(
            out,
            "{} {} {} {}",
            self.curve_speed_rad_s.len(),
            self.max_engine_brake_torque_nm,
            self.idle_speed_rad_s,
            self.max_speed_rad_s
        );
        for (w, t) in self.curve_speed_rad_s.iter().zip(&self.curve_torque_nm) {
            let _ = writeln!(out, "{w} {t}");
        }
        out
    }
}

/// Fuel-rate table over (engine speed, engine torque), bilinearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct FuelMap {
    pub engine_speed_grid: Vec<f64>,
    pub torque_grid: Vec<f64>,
    /// Row-major `[speed][torque]` table (g/s).
    pub rate_table_g_s: Vec<f64>,
    pub max_rate_g_s: f64,
}

impl FuelMap {
    pub fn new(engine_speed_grid: Vec<f64>, torque_grid: Vec<f64>, rate_table_g_s: Vec<f64>, max_rate_g_s: f64) -> Result<Self> {
        let map = Self {
            engine_speed_grid,
            torque_grid,
            rate_table_g_s,
            max_rate_g_s,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, nt) = (self.engine_speed_grid.len(), self.torque_grid.len());
        if ns < 2 || nt < 2 {
            return Err(Error::invalid("fuel map grids need at least 2 points"));
        }
        if !strictly_ascending(&self.engine_speed_grid) || !strictly_ascending(&self.torque_grid) {
            return Err(Error::invalid("fuel map grids must be strictly ascending"));
        }
        if self.rate_table_g_s.len() != ns * nt {
            return Err(Error::invalid(format!(
                "fuel table has {} entries, grid needs {}",
                self.rate_table_g_s.len(),
                ns * nt
            )));
        }
        if self
            .rate_table_g_s
            .iter()
            .any(|r| !(r.is_finite() && *r >= 0.0 && *r <= self.max_rate_g_s))
        {
            return Err(Error::invalid("fuel rates must lie in [0, max rate]"));
        }
        Ok(())
    }

    /// Willans-line map `ṁ = max(0, k₀ω + ωT/η)/LHV` sampled on a 20×20 grid
    /// spanning the engine's speed range and 0..peak torque, clipped at 18 g/s.
    pub fn willans(engine: &EngineSpec) -> Self {
        const N: usize = 20;
        const FRICTION_W_PER_RAD_S: f64 = 340.0;
        const INDICATED_EFF: f64 = 0.45;
        let peak = engine.curve_torque_nm.iter().cloned().fold(0.0, f64::max);
        let speeds: Vec<f64> = (0..N)
            .map(|k| engine.idle_speed_rad_s + (engine.max_speed_rad_s - engine.idle_speed_rad_s) * k as f64 / (N - 1) as f64)
            .collect();
        let torques: Vec<f64> = (0..N).map(|k| peak * k as f64 / (N - 1) as f64).collect();
        let mut table = Vec::with_capacity(N * N);
        for &w in &speeds {
            for &t in &torques {
                let power = FRICTION_W_PER_RAD_S * w + w * t / INDICATED_EFF;
                table.push((power.max(0.0) / DIESEL_LHV_J_G).min(MAX_FUEL_RATE_G_S));
            }
        }
        Self {
            engine_speed_grid: speeds,
            torque_grid: torques,
            rate_table_g_s: table,
            max_rate_g_s: MAX_FUEL_RATE_G_S,
        }
    }

    fn node(&self, i: usize, j: usize) -> f64 {
        self.rate_table_g_s[i * self.torque_grid.len() + j]
    }

    /// Text format: `<n_speed> <n_torque> <max_rate>` header, then the speed
    /// grid on one line, the torque grid on one line, and `n_speed` rows of
    /// `n_torque` rates. `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = data_lines(text);
        let mut next = |what: &str| -> Result<Vec<f64>> {
            let (n, line) = rows.next().ok_or_else(|| Error::invalid(format!("fuel map truncated at {what}")))?;
            parse_reals(line, n)
        };
        let header = next("header")?;
        if header.len() != 3 {
            return Err(Error::invalid("fuel map header needs 3 fields"));
        }
        let (ns, nt) = (header[0] as usize, header[1] as usize);
        let speeds = next("speed grid")?;
        let torques = next("torque grid")?;
        if speeds.len() != ns || torques.len() != nt {
            return Err(Error::invalid("fuel map grid lengths disagree with header"));
        }
        let mut table = Vec::with_capacity(ns * nt);
        for _ in 0..ns {
            let row = next("table row")?;
            if row.len() != nt {
                return Err(Error::invalid("fuel map row has wrong length"));
            }
            table.extend(row);
        }
        Self::new(speeds, torques, table, header[2])
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# fuel map: n_speed n_torque max_rate, speed grid (rad/s), torque grid (Nm), rows of g/s\n");
        let _ = writeln!(
            out,
            "{} {} {}",
            self.engine_speed_grid.len(),
            self.torque_grid.len(),
            self.max_rate_g_s
        );
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "{}", join(&self.engine_speed_grid));
        let _ = writeln!(out, "{}", join(&self.torque_grid));
        for row in self.rate_table_g_s.chunks(self.torque_grid.len()) {
            let _ = writeln!(out, "{}", join(row));
        }
        out
    }
}

/// Vehicle parameters bundled with its engine limits and fuel map.
#[derive(Debug, Clone, PartialEq)]
pub struct Vehicle {
    pub params: VehicleParams,
    pub engine: EngineSpec,
    pub fuel_map: FuelMap,
}

impl Default for Vehicle {
    fn default() -> Self {
        let engine = EngineSpec::default();
        let fuel_map = FuelMap::willans(&engine);
        Self {
            params: VehicleParams::default(),
            engine,
            fuel_map,
        }
    }
}

impl Vehicle {
    pub fn with_mass(mut self, mass_kg: f64) -> Self {
        self.params.mass_kg = mass_kg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.engine.validate()?;
        self.fuel_map.validate()
    }

    /// Largest positive wheel torque deliverable in `gear` at `velocity`.
    pub fn max_wheel_torque_nm(&self, velocity_m_s: f64, gear_index: u8) -> Result<f64> {
        let w = engine_speed_for(velocity_m_s, gear_index, &self.params, &self.engine)?;
        let wheel = self.engine.max_torque_nm(w) * self.params.overall_ratio(gear_index)? * self.params.final_drive_eff;
        Ok(wheel.min(self.params.max_traction_torque_nm))
    }
}

/// Advances the vehicle by one explicit Euler step of `dt_s` under wheel torque
/// `traction_torque_nm` (negative values brake).
pub fn step_dynamics(
    state: &VehicleState,
    vehicle: &Vehicle,
    traction_torque_nm: f64,
    grade_rad: f64,
    dt_s: f64,
) -> Result<VehicleState> {
    if !traction_torque_nm.is_finite() || !grade_rad.is_finite() || !dt_s.is_finite() {
        return Err(Error::NonFinite("step_dynamics inputs"));
    }
    if dt_s <= 0.0 {
        return Err(Error::invalid(format!("dt must be positive, got {dt_s}")));
    }
    let p = &vehicle.params;
    if traction_torque_nm.abs() > p.max_traction_torque_nm {
        return Err(Error::invalid(format!(
            "|traction torque| {traction_torque_nm} exceeds {}",
            p.max_traction_torque_nm
        )));
    }
    state.check()?;

    let v = state.velocity_m_s;
    let force = traction_torque_nm / p.wheel_radius_m
        - p.rolling_resistance_n(v, grade_rad)
        - p.aero_drag_n(v)
        - p.grade_force_n(grade_rad);
    let v_next = (v + force / p.effective_mass_kg() * dt_s).max(0.0);

    let gear = state.gear_index;
    let engine_speed = engine_speed_for(v_next, gear, p, &vehicle.engine)?;
    let engine_torque = if traction_torque_nm > 0.0 {
        traction_torque_nm / (p.overall_ratio(gear)? * p.final_drive_eff)
    } else {
        let (engine_part, _) = split_brake_torque(traction_torque_nm, vehicle, state)?;
        engine_part / p.overall_ratio(gear)?
    };
    let fuel = fuel_rate(&vehicle.fuel_map, engine_speed, engine_torque);

    Ok(VehicleState {
        velocity_m_s: v_next,
        position_m: state.position_m + v * dt_s,
        gear_index: gear,
        accel_m_s2: (v_next - v) / dt_s,
        engine_speed_rad_s: engine_speed,
        engine_torque_nm: engine_torque,
        fuel_rate_g_s: fuel,
    })
}

/// Splits a braking demand at the wheel into (engine brake, service brake)
/// parts, engine braking first. Both parts are ≤ 0 and sum to the demand.
pub fn split_brake_torque(demand_nm: f64, vehicle: &Vehicle, state: &VehicleState) -> Result<(f64, f64)> {
    if demand_nm > 0.0 {
        return Err(Error::Contract(format!("brake demand must be ≤ 0, got {demand_nm}")));
    }
    if !demand_nm.is_finite() {
        return Err(Error::NonFinite("brake demand"));
    }
    let max_engine_at_wheel =
        vehicle.engine.max_engine_brake_torque_nm * vehicle.params.overall_ratio(state.gear_index)?;
    let engine = demand_nm.max(-max_engine_at_wheel);
    Ok((engine, demand_nm - engine))
}

/// Bilinear fuel rate (g/s). Inputs outside the grid clamp to its edge;
/// non-positive torque cuts fuel entirely.
pub fn fuel_rate(map: &FuelMap, engine_speed_rad_s: f64, engine_torque_nm: f64) -> f64 {
    if !(engine_torque_nm > 0.0) {
        return 0.0;
    }
    let (i, fx) = locate(&map.engine_speed_grid, engine_speed_rad_s);
    let (j, fy) = locate(&map.torque_grid, engine_torque_nm);
    let r00 = map.node(i, j);
    let r01 = map.node(i, j + 1);
    let r10 = map.node(i + 1, j);
    let r11 = map.node(i + 1, j + 1);
    let rate = (1.0 - fx) * ((1.0 - fy) * r00 + fy * r01) + fx * ((1.0 - fy) * r10 + fy * r11);
    rate.clamp(0.0, map.max_rate_g_s)
}

/// Unclamped driveline speed `(v / r_w) · R_fd · ratio` (rad/s).
pub fn driveline_speed(velocity_m_s: f64, gear_index: u8, params: &VehicleParams) -> Result<f64> {
    Ok(velocity_m_s / params.wheel_radius_m * params.overall_ratio(gear_index)?)
}

/// Engine speed in `gear` at `velocity`, clamped to `[idle, max]`.
pub fn engine_speed_for(velocity_m_s: f64, gear_index: u8, params: &VehicleParams, engine: &EngineSpec) -> Result<f64> {
    Ok(driveline_speed(velocity_m_s, gear_index, params)?.clamp(engine.idle_speed_rad_s, engine.max_speed_rad_s))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerReserve {
    /// Remaining deliverable power (W), ≥ 0.
    pub reserve_w: f64,
    /// Full-load power available at the wheel at this operating point (W).
    pub max_w: f64,
}

pub fn power_reserve(
    velocity_m_s: f64,
    gear_index: u8,
    current_wheel_power_w: f64,
    engine: &EngineSpec,
    params: &VehicleParams,
) -> Result<PowerReserve> {
    if !(velocity_m_s >= 0.0) {
        return Err(Error::invalid(format!("velocity must be ≥ 0, got {velocity_m_s}")));
    }
    let w = engine_speed_for(velocity_m_s, gear_index, params, engine)?;
    let max_w = engine.max_torque_nm(w) * w * params.final_drive_eff;
    Ok(PowerReserve {
        reserve_w: (max_w - current_wheel_power_w).max(0.0),
        max_w,
    })
}

fn strictly_ascending(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[1] > w[0])
}

/// Cell index and in-cell fraction for `x` on an ascending grid, clamped.
fn locate(grid: &[f64], x: f64) -> (usize, f64) {
    let last = grid.len() - 1;
    if !(x > grid[0]) {
        return (0, 0.0);
    }
    if x >= grid[last] {
        return (last - 1, 1.0);
    }
    let i = grid.partition_point(|g| *g <= x) - 1;
    (i, (x - grid[i]) / (grid[i + 1] - grid[i]))
}

fn interp1(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let (i, f) = locate(xs, x);
    ys[i] + f * (ys[i + 1] - ys[i])
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_reals(line: &str, line_no: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::invalid(format!("line {line_no}: cannot parse {tok:?} as a real")))
        })
        .collect()
}
