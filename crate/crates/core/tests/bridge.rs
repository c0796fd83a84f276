use entroproj::bridge::brute_force::{enumerated_marginals, primal_oracle};
use entroproj::bridge::{
    forward_backward, gaussian_profile, solve_constrained_bridge, BridgeConfig, MarkovReference,
};
use entroproj::constraints::EndpointEquality;
use entroproj::rng::stream_rng;
use entroproj::Multiplier;
use proptest::prelude::*;
use rand::Rng;

fn small_instance(shift: f64, center: f64) -> (MarkovReference, EndpointEquality, Vec<f64>) {
    let r = MarkovReference::gaussian_rw(4, -1.5, 1.5, 0.8, 3, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
    let target = gaussian_profile(r.states(), center, 0.5).unwrap();
    let t = EndpointEquality::new(target.clone(), target).unwrap();
    let mut psi = r.psi_values(|x| x - shift);
    // Endpoints are fixed by the equality constraints.
    psi[..4].fill(0.0);
    psi[12..].fill(0.0);
    (r, t, psi)
}

#[test]
fn constrained_bridge_matches_enumeration_oracle() {
    for (shift, center) in [(0.0, 1.0), (0.2, 0.8), (-0.1, 0.3), (0.0, -0.5)] {
        let (r, t, psi) = small_instance(shift, center);
        let sol = solve_constrained_bridge(&r, &t, &psi, &BridgeConfig::default()).unwrap();
        let oracle = primal_oracle(&r, &t, &psi).unwrap();
        assert!(sol.converged);
        assert!(oracle.endpoint_error < 1e-12 && oracle.max_violation < 1e-12, "{oracle:?}");
        assert!((sol.value - oracle.value).abs() < 1e-6, "{} vs {}", sol.value, oracle.value);
        assert!(sol.endpoint_error <= 1e-8);
        assert!(sol.kkt.max_slackness_residual <= 1e-8);
        assert!(sol.kkt.max_violation <= 1e-8);
        for (a, b) in sol.multiplier.atoms().iter().zip(oracle.multiplier.atoms()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        let (marg, _) = enumerated_marginals(&r, &sol.zeta0, &sol.zeta_t, &sol.multiplier, &psi).unwrap();
        for (a, b) in sol.marginals.iter().zip(&marg) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn binding_instance_has_positive_multiplier() {
    let (r, t, psi) = small_instance(0.0, 1.0);
    let sol = solve_constrained_bridge(&r, &t, &psi, &BridgeConfig::default()).unwrap();
    assert!(sol.multiplier.mass() > 0.0);
    assert!(sol.min_marginal > 0.0);
    for w in sol.dual_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-12 * w[0].abs().max(1.0));
    }
}

#[test]
fn random_walk_centered_at_one() {
    let r = MarkovReference::gaussian_rw(41, -4.0, 4.0, 0.2, 20, vec![1.0; 41]).unwrap();
    let target = gaussian_profile(r.states(), 1.0, 0.3).unwrap();
    let t = EndpointEquality::new(target.clone(), target).unwrap();
    let mut psi = r.psi_values(|x| x);
    psi[..41].fill(0.0);
    psi[20 * 41..].fill(0.0);
    let sol = solve_constrained_bridge(&r, &t, &psi, &BridgeConfig::default()).unwrap();
    assert!(sol.converged);
    assert!(sol.multiplier.atoms().iter().any(|l| *l > 0.0));
    for j in 0..=20 {
        assert!(sol.gradient[j] <= 1e-8);
    }
    assert!(sol.kkt.max_slackness_residual <= 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_backward_matches_enumeration(seed in 0u64..1_000_000, s in 2usize..6, m in 1usize..5) {
        let mut rng = stream_rng(seed, 0);
        let init: Vec<f64> = (0..s).map(|_| rng.random_range(0.1..1.0)).collect();
        let r = MarkovReference::gaussian_rw(s, -1.0, 1.0, rng.random_range(0.2..2.0), m, init).unwrap();
        let z0: Vec<f64> = (0..s).map(|_| rng.random_range(-2.0..2.0)).collect();
        let zt: Vec<f64> = (0..s).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lam = Multiplier::new((0..=m).map(|_| if rng.random_bool(0.5) { rng.random_range(0.0..3.0) } else { 0.0 }).collect()).unwrap();
        let psi: Vec<f64> = (0..(m + 1) * s).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fb = forward_backward(&r, &z0, &zt, &lam, &psi).unwrap();
        let (marg, log_z) = enumerated_marginals(&r, &z0, &zt, &lam, &psi).unwrap();
        prop_assert!((fb.log_z - log_z).abs() < 1e-10);
        for (a, b) in fb.marginals.iter().zip(&marg) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        for j in 0..=m {
            let total: f64 = fb.marginal(j, s).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
