//! One test only: the timings must not share the CPU with other tests.

mod common;

use common::checks::scaling_scenario;
use fleet_core::harness::{linear_fit, run_scaling};

#[test]
fn traffic_is_linear_and_regression_time_grows_evenly() {
    let cfg = scaling_scenario();
    let sizes = [1usize, 2, 4, 8];
    let (reports, table) = run_scaling(&cfg, &sizes).unwrap();
    assert_eq!(reports.len(), sizes.len());

    let xs: Vec<f64> = table.rows.iter().map(|r| r.fleet_size as f64).collect();
    let up: Vec<f64> = table.rows.iter().map(|r| r.bytes_up_per_round).collect();
    let fit = linear_fit(&xs, &up).unwrap();
    assert!(fit.r_squared > 0.999, "up-bytes r2 {}", fit.r_squared);
    assert!(fit.slope > 0.0);
    let down: Vec<f64> = table.rows.iter().map(|r| r.bytes_down_per_round).collect();
    assert!(down.iter().all(|d| *d == down[0] && *d > 0.0), "down-bytes {down:?}");

    let times: Vec<f64> = table.rows.iter().map(|r| r.regression_s).collect();
    assert!(times.windows(2).all(|w| w[1] > w[0]), "regression times {times:?}");
    let inc = table.per_agent_increments();
    let hi = inc.iter().cloned().fold(f64::MIN, f64::max);
    let lo = inc.iter().cloned().fold(f64::MAX, f64::min);
    assert!(lo > 0.0 && hi <= 2.0 * lo, "per-agent increments {inc:?}");
}
