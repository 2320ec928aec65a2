#![allow(dead_code)]

pub mod checks;

use fleet_core::env::StateVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let up = f(&p);
            p[i] = orig - FD_STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Elementwise relative error with an absolute floor so that entries which
/// are zero up to rounding do not dominate.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-6 * scale.max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn random_state(rng: &mut ChaCha8Rng) -> StateVector {
    StateVector {
        v_e: rng.random_range(0.0..30.0),
        a_e: rng.random_range(-3.0..3.0),
        a_des: rng.random_range(-6.0..3.0),
        n_g: rng.random_range(1..=10) as f64,
        a_des_prev: rng.random_range(-6.0..3.0),
        n_g_prev: rng.random_range(1..=10) as f64,
    }
}

pub fn random_states(rng: &mut ChaCha8Rng, n: usize) -> Vec<StateVector> {
    (0..n).map(|_| random_state(rng)).collect()
}

pub fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -rng.random_range(1e-6f64..1.0).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Retrace by the unrolled sum
/// `Q_ret(t) = Q(t) + Σ_{k≥t} γ^{k−t} (Π_{j=t+1..k} c_j) δ_k`,
/// `δ_k = r_k + γ V_{k+1} − Q(k)`.
pub fn naive_retrace(rewards: &[f64], q: &[f64], v_next: &[f64], c: &[f64], gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let mut total = q[t];
            for k in t..n {
                let mut coef = gamma.powi((k - t) as i32);
                for cj in &c[t + 1..=k] {
                    coef *= cj;
                }
                total += coef * (rewards[k] + gamma * v_next[k] - q[k]);
            }
            total
        })
        .collect()
}

/// Minimizer of `Σ_t ζ_t · H(p_t, q)` over a uniform grid on the 3-simplex.
pub fn simplex_grid_argmin(teachers: &[[f64; 3]], zeta: &[f64], steps: usize) -> [f64; 3] {
    let mut best = ([1.0 / 3.0; 3], f64::INFINITY);
    for i in 1..steps {
        for j in 1..steps - i {
            let q = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
            let loss: f64 = teachers
                .iter()
                .zip(zeta)
                .map(|(p, z)| -z * p.iter().zip(&q).map(|(pk, qk)| pk * qk.ln()).sum::<f64>())
                .sum();
            if loss < best.1 {
                best = (q, loss);
            }
        }
    }
    best.0
}

pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Root of `g` on `[lo, hi]` by bisection; `g(lo)` and `g(hi)` must differ in sign.
pub fn bisect(mut lo: f64, mut hi: f64, g: impl Fn(f64) -> f64) -> f64 {
    let glo = g(lo);
    assert!(glo * g(hi) < 0.0, "root not bracketed");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (g(mid) > 0.0) == (glo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
