mod common;

use common::{bisect, checks};
use fleet_core::dynamics::{
    fuel_rate, step_dynamics, Vehicle, VehicleState, MAX_FUEL_RATE_G_S, MAX_MASS_KG, MIN_MASS_KG, NUM_GEARS,
};
use proptest::prelude::*;

#[test]
fn terminal_velocity_matches_force_balance() {
    for (mass, torque) in [(12_000.0, 3_000.0), (8_000.0, 2_000.0), (24_000.0, 5_000.0), (16_000.0, 4_000.0)] {
        let err = checks::terminal_velocity_err(mass, torque);
        assert!(err <= 1e-3, "mass {mass} torque {torque}: relative error {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn terminal_velocity_any_mass_and_torque(mass in MIN_MASS_KG..MAX_MASS_KG, torque in 1_000.0f64..8_000.0) {
        prop_assume!(checks::net_force(&Vehicle::default().with_mass(mass), torque, 0.0) > 1.0);
        prop_assert!(checks::terminal_velocity_err(mass, torque) <= 1e-3);
    }

    #[test]
    fn fuel_rate_never_exceeds_cap(
        mass in MIN_MASS_KG..MAX_MASS_KG,
        speed in 0.0f64..40.0,
        torque in -18_000.0f64..=18_000.0,
        gear in 1u8..=NUM_GEARS,
    ) {
        let v = Vehicle::default().with_mass(mass);
        let mut s = VehicleState::at_rest(gear, &v.engine);
        s.velocity_m_s = speed;
        let next = step_dynamics(&s, &v, torque, 0.0, 0.5).unwrap();
        prop_assert!(next.fuel_rate_g_s >= 0.0);
        prop_assert!(next.fuel_rate_g_s <= MAX_FUEL_RATE_G_S);
    }

    #[test]
    fn fuel_map_is_capped_everywhere(w in -100.0f64..1000.0, t in -5_000.0f64..20_000.0) {
        let rate = fuel_rate(&Vehicle::default().fuel_map, w, t);
        prop_assert!((0.0..=MAX_FUEL_RATE_G_S).contains(&rate));
    }
}

#[test]
fn rewards_bounded_over_a_million_fuzzed_steps() {
    let f = checks::fuzz_rewards(1_000_000, 81);
    assert_eq!(f.steps, 1_000_000);
    assert!(f.episodes > 3);
    assert_eq!(f.violations, 0);
    assert!(f.max_fuel_g_s <= MAX_FUEL_RATE_G_S);
}

#[test]
fn terminal_velocity_scales_with_torque() {
    let v = Vehicle::default();
    let root = |t: f64| bisect(0.0, 200.0, |x| checks::net_force(&v, t, x));
    assert!(root(4_000.0) > root(3_000.0));
    // closed form of the flat-road balance
    let p = &v.params;
    let t = 3_000.0;
    let closed = ((t / p.wheel_radius_m - p.mass_kg * 9.81 * p.c_rolling) / (0.5 * p.air_density_kg_m3 * p.c_drag * p.frontal_area_m2)).sqrt();
    assert!((root(t) - closed).abs() < 1e-9 * closed);
}
