mod common;

use common::checks::{self, GRAD_TOL};
use common::{random_simplex, random_states, rng};
use fleet_core::env::{NUM_GEAR_COMMANDS, STATE_DIM};
use fleet_core::nn::{entropy_categorical, kl_categorical, kl_gaussian, xent_categorical, xent_gaussian};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn trunk_gradient_matches_finite_differences(seed in any::<u64>()) {
        prop_assert!(checks::trunk_grad_err(seed) < GRAD_TOL);
    }

    #[test]
    fn policy_heads_gradient_matches_finite_differences(seed in any::<u64>()) {
        prop_assert!(checks::policy_heads_grad_err(seed) < GRAD_TOL);
    }

    #[test]
    fn critic_gradient_matches_finite_differences(seed in any::<u64>()) {
        prop_assert!(checks::critic_grad_err(seed) < GRAD_TOL);
    }

    #[test]
    fn categorical_cross_entropy_gradient(seed in any::<u64>()) {
        prop_assert!(checks::xent_categorical_grad_err(seed) < GRAD_TOL);
    }

    #[test]
    fn gaussian_cross_entropy_gradient(seed in any::<u64>()) {
        prop_assert!(checks::xent_gaussian_grad_err(seed) < GRAD_TOL);
    }

    #[test]
    fn trust_region_kl_gradients(seed in any::<u64>()) {
        prop_assert!(checks::trust_region_kl_grad_err(seed) < GRAD_TOL);
    }

    #[test]
    fn group_kl_gradients(seed in any::<u64>()) {
        prop_assert!(checks::group_kl_grad_err(seed) < GRAD_TOL);
    }

    #[test]
    fn full_m_step_gradient(seed in any::<u64>()) {
        prop_assert!(checks::m_step_grad_err(seed) < GRAD_TOL);
    }

    #[test]
    fn group_regression_gradient(seed in any::<u64>()) {
        prop_assert!(checks::group_regression_grad_err(seed) < GRAD_TOL);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn gaussian_self_cross_entropy_is_entropy(mu in -5.0..5.0f64, sigma in 1e-3..10.0f64) {
        let expected = 0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln() + 0.5;
        prop_assert!((xent_gaussian(mu, sigma, mu, sigma) - expected).abs() < 1e-12);
        prop_assert_eq!(kl_gaussian(mu, sigma, mu, sigma), 0.0);
    }

    #[test]
    fn cross_entropy_is_entropy_plus_kl(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = random_simplex(&mut r, NUM_GEAR_COMMANDS);
        let q = random_simplex(&mut r, NUM_GEAR_COMMANDS);
        let logits: Vec<f64> = q.iter().map(|x| x.ln()).collect();
        let (h_pq, _) = xent_categorical(&p, &logits).unwrap();
        let decomposed = entropy_categorical(&p) + kl_categorical(&p, &q).unwrap();
        prop_assert!((h_pq - decomposed).abs() < 1e-10);
        prop_assert!(kl_categorical(&p, &p).unwrap().abs() < 1e-15);

        let (mi, si, mg, sg) = (r.random_range(-2.0..2.0), r.random_range(0.05..2.0), r.random_range(-2.0..2.0), r.random_range(0.05..2.0));
        let h_i = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * si * si).ln();
        prop_assert!((xent_gaussian(mi, si, mg, sg) - (h_i + kl_gaussian(mi, si, mg, sg))).abs() < 1e-10);
    }
}

#[test]
fn identities_hold_on_1000_pairs() {
    for seed in 0..1000 {
        let [self_xent, self_kl, decomposition] = checks::identity_errors(seed);
        assert!(self_xent < 1e-12 && self_kl < 1e-15 && decomposition < 1e-10, "seed {seed}");
    }
}

#[test]
fn state_dimension_matches_feature_width() {
    let s = random_states(&mut rng(0), 1);
    assert_eq!(s[0].features().len(), STATE_DIM);
}
