//! One pass/fail line per acceptance criterion. Exits non-zero on any failure.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::checks::{self, GRADIENT_CHECKS, GRAD_TOL};
use common::rng;
use fleet_core::coordinator::zeta_from_advantage;
use fleet_core::dynamics::{step_dynamics, Vehicle, VehicleState, MAX_FUEL_RATE_G_S, MAX_MASS_KG, MIN_MASS_KG, NUM_GEARS};
use fleet_core::harness::{build_initial_checkpoint, linear_fit, run_scaling, run_seed, CycleSummary, ScenarioConfig, Strategy};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradients() -> Outcome {
    let mut worst = ("", 0.0f64);
    for (name, check) in GRADIENT_CHECKS {
        for seed in 0..50 {
            let e = check(seed);
            if !(e < worst.1) {
                worst = (name, e);
            }
        }
    }
    outcome(worst.1 < GRAD_TOL, format!("worst relative error {:.2e} ({})", worst.1, worst.0))
}

fn identities() -> Outcome {
    let mut worst = [0.0f64; 3];
    for seed in 0..1000 {
        for (w, e) in worst.iter_mut().zip(checks::identity_errors(seed)) {
            *w = w.max(e);
        }
    }
    let pass = worst[0] < 1e-12 && worst[1] < 1e-12 && worst[2] < 1e-10;
    outcome(
        pass,
        format!("self-xent {:.1e}, KL(p|p) {:.1e}, xent-(H+KL) {:.1e}", worst[0], worst[1], worst[2]),
    )
}

fn single_teacher() -> Outcome {
    let (before, after) = checks::single_teacher_kl(11);
    outcome(after < 1e-3, format!("mean KL {before:.3} -> {after:.2e}"))
}

fn weighted_teachers() -> Outcome {
    let tv = checks::weighted_teacher_tv(21);
    outcome(tv < 0.01, format!("TV to grid minimizer {tv:.4}"))
}

fn advantage_weights() -> Outcome {
    let z0 = zeta_from_advantage(0.0, 0.8);
    let err = (zeta_from_advantage(0.4, 0.8) - 0.5f64.exp()).abs();
    outcome(z0 == 1.0 && err < 1e-12, format!("zeta(0) = {z0}, |zeta(0.4) - e^0.5| = {err:.1e}"))
}

fn retrace() -> Outcome {
    let worst = (0..200).map(|s| checks::retrace_window_err(s, 6, 0.99)).fold(0.0, f64::max);
    outcome(worst < 1e-10, format!("200 windows, max error {worst:.1e}"))
}

fn baseline() -> Outcome {
    match checks::baseline_reduction_mismatch(2, 3, 7) {
        None => outcome(true, "fleet 2, 3 cycles, bitwise identical".into()),
        Some(m) => outcome(false, m),
    }
}

fn dynamics() -> Outcome {
    let cases = [(12_000.0, 3_000.0), (8_000.0, 2_000.0), (24_000.0, 5_000.0), (16_000.0, 4_000.0)];
    let vel = cases.iter().map(|&(m, t)| checks::terminal_velocity_err(m, t)).fold(0.0, f64::max);
    let mut r = rng(82);
    let mut fuel = 0.0f64;
    for _ in 0..100_000 {
        let v = Vehicle::default().with_mass(r.random_range(MIN_MASS_KG..MAX_MASS_KG));
        let mut s = VehicleState::at_rest(r.random_range(1..=NUM_GEARS), &v.engine);
        s.velocity_m_s = r.random_range(0.0..40.0);
        let next = step_dynamics(&s, &v, r.random_range(-18_000.0..18_000.0), r.random_range(-0.08..0.08), 0.5).unwrap();
        fuel = fuel.max(next.fuel_rate_g_s);
    }
    outcome(
        vel <= 1e-3 && fuel <= MAX_FUEL_RATE_G_S,
        format!("terminal velocity error {vel:.1e}, max fuel rate {fuel:.2} g/s"),
    )
}

fn rewards() -> Outcome {
    let f = checks::fuzz_rewards(1_000_000, 81);
    outcome(
        f.steps == 1_000_000 && f.violations == 0 && f.max_fuel_g_s <= checks::fuel_cap(),
        format!("{} steps over {} episodes, {} violations", f.steps, f.episodes, f.violations),
    )
}

/// Mean over the last five cycles of the fleet range and fleet mean.
fn tail(summary: &[CycleSummary]) -> (f64, f64) {
    let last = &summary[summary.len().saturating_sub(5)..];
    let n = last.len() as f64;
    (last.iter().map(|c| c.range()).sum::<f64>() / n, last.iter().map(|c| c.mean).sum::<f64>() / n)
}

fn fleet_comparison() -> (Outcome, Outcome) {
    let base = ScenarioConfig::desk();
    let (sets, _) = base.resolve_routes().unwrap();
    let (mut range_wins, mut mean_wins) = (0, 0);
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let ckpt = build_initial_checkpoint(&base, &sets, seed).unwrap();
        let run = |strategy| {
            let mut c = base.clone();
            c.strategy = strategy;
            tail(&run_seed(&c, seed, Some(&ckpt)).unwrap().report.reward_summary())
        };
        let (sr, sm) = run(Strategy::Shared);
        let (ir, im) = run(Strategy::Individual);
        range_wins += usize::from(sr < ir);
        mean_wins += usize::from(sm >= im);
        lines.push(format!("seed {seed}: range {sr:.4}/{ir:.4} mean {sm:.4}/{im:.4}"));
        eprintln!("  {}", lines.last().unwrap());
    }
    (
        outcome(range_wins >= 4, format!("shared range smaller in {range_wins}/5 seeds")),
        outcome(mean_wins >= 4, format!("shared mean at least individual in {mean_wins}/5 seeds")),
    )
}

fn scaling() -> (Outcome, Outcome) {
    let sizes = [1usize, 2, 4, 8];
    let (_, table) = run_scaling(&checks::scaling_scenario(), &sizes).unwrap();
    let xs: Vec<f64> = table.rows.iter().map(|r| r.fleet_size as f64).collect();
    let up: Vec<f64> = table.rows.iter().map(|r| r.bytes_up_per_round).collect();
    let down: Vec<f64> = table.rows.iter().map(|r| r.bytes_down_per_round).collect();
    let fit = linear_fit(&xs, &up).unwrap();
    let traffic = outcome(
        fit.r_squared > 0.999 && down.iter().all(|d| *d == down[0]),
        format!("up-bytes R2 {:.6}, down-bytes {down:?}", fit.r_squared),
    );
    let times: Vec<f64> = table.rows.iter().map(|r| r.regression_s).collect();
    let inc = table.per_agent_increments();
    let hi = inc.iter().cloned().fold(f64::MIN, f64::max);
    let lo = inc.iter().cloned().fold(f64::MAX, f64::min);
    let timing = outcome(
        times.windows(2).all(|w| w[1] > w[0]) && lo > 0.0 && hi <= 2.0 * lo,
        format!("regression s {times:.3?}, per-agent increments {inc:.3?}"),
    );
    (traffic, timing)
}

fn protocol() -> Outcome {
    let failures = checks::round_trip_failures(10_000, 91);
    let golden = checks::golden_mismatches();
    let (detected, flips) = checks::flip_detection(40, 92);
    outcome(
        failures == 0 && golden.is_empty() && detected == flips,
        format!("{failures} round-trip failures, golden mismatches {golden:?}, {detected}/{flips} flips detected"),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, Outcome, f64)> = Vec::new();
    let mut timed = |ids: &[usize], f: &dyn Fn() -> Vec<Outcome>| {
        let t = Instant::now();
        let outs = f();
        let secs = t.elapsed().as_secs_f64();
        for (id, o) in ids.iter().zip(outs) {
            println!("criterion {id}: {} {} [{secs:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((*id, o, secs));
        }
    };
    timed(&[1], &|| vec![gradients()]);
    timed(&[2], &|| vec![identities()]);
    timed(&[3], &|| vec![single_teacher()]);
    timed(&[4], &|| vec![weighted_teachers()]);
    timed(&[5], &|| vec![advantage_weights()]);
    timed(&[6], &|| vec![retrace()]);
    timed(&[7], &|| vec![baseline()]);
    timed(&[8], &|| vec![dynamics()]);
    timed(&[9], &|| vec![rewards()]);
    timed(&[10, 11], &|| {
        let (a, b) = fleet_comparison();
        vec![a, b]
    });
    timed(&[12, 13], &|| {
        let (a, b) = scaling();
        vec![a, b]
    });
    timed(&[14], &|| vec![protocol()]);

    let failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: {} of {} criteria pass", results.len(), results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}
