//! Intelligent Driver Model (Treiber form) for the ego driver following a
//! route-driven lead vehicle.

use crate::error::{Error, Result};

/// Lower bound on the driver's demanded acceleration (m/s²).
pub const MIN_DESIRED_ACCEL_M_S2: f64 = -6.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdmParams {
    /// Desired free-road speed v₀ (m/s).
    pub desired_speed_m_s: f64,
    /// Desired time headway (s), in [3, 4].
    pub time_headway_s: f64,
    /// Standstill gap s₀ (m), in [5, 7].
    pub min_gap_m: f64,
    pub max_accel_m_s2: f64,
    pub comfort_decel_m_s2: f64,
    pub accel_exponent: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            desired_speed_m_s: 25.0,
            time_headway_s: 3.5,
            min_gap_m: 6.0,
            max_accel_m_s2: 3.0,
            comfort_decel_m_s2: 3.0,
            accel_exponent: 4.0,
        }
    }
}

impl IdmParams {
    /// Free-road speed for a route with the given top speed: 5% above it.
    pub fn desired_speed_for_route(route_max_speed_m_s: f64) -> f64 {
        1.05 * route_max_speed_m_s
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.desired_speed_m_s,
            self.time_headway_s,
            self.min_gap_m,
            self.max_accel_m_s2,
            self.comfort_decel_m_s2,
            self.accel_exponent,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("IDM parameters must be positive"));
        }
        if !(3.0..=4.0).contains(&self.time_headway_s) {
            return Err(Error::invalid(format!("time headway {} outside [3, 4] s", self.time_headway_s)));
        }
        if !(5.0..=7.0).contains(&self.min_gap_m) {
            return Err(Error::invalid(format!("min gap {} outside [5, 7] m", self.min_gap_m)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeadState {
    pub position_m: f64,
    pub velocity_m_s: f64,
}

/// Desired ego acceleration from the IDM, clamped to `[-6, A_max]`.
///
/// Fails with [`Error::Collision`] when the gap to the leader is not positive.
pub fn desired_acceleration(ego_v: f64, ego_pos: f64, lead: &LeadState, p: &IdmParams) -> Result<f64> {
    let gap = lead.position_m - ego_pos;
    if !gap.is_finite() || !ego_v.is_finite() || !lead.velocity_m_s.is_finite() {
        return Err(Error::NonFinite("IDM inputs"));
    }
    if gap <= 0.0 {
        return Err(Error::Collision { gap_m: gap });
    }
    let approach = ego_v - lead.velocity_m_s;
    let dynamic = ego_v * p.time_headway_s
        + ego_v * approach / (2.0 * (p.max_accel_m_s2 * p.comfort_decel_m_s2).sqrt());
    let s_star = p.min_gap_m + dynamic.max(0.0);
    let free = (ego_v / p.desired_speed_m_s).powf(p.accel_exponent);
    let interaction = (s_star / gap).powi(2);
    let a = p.max_accel_m_s2 * (1.0 - free - interaction);
    Ok(a.clamp(MIN_DESIRED_ACCEL_M_S2, p.max_accel_m_s2))
}
