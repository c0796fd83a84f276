use std::sync::Arc;

use entroproj::hjb::{feynman_kac_phi, girsanov_density_check, gradient_phi, HjbQuery};
use entroproj::reference::oracle::gaussian_oracle;
use entroproj::reference::{sample_paths, SamplingOptions, SdeSpec, TimeProfile};
use entroproj::rng::stream_rng;
use entroproj::{Multiplier, TimeGrid};
use proptest::prelude::*;
use rand::Rng;

fn oracle_query(spec: &SdeSpec, horizon: f64, m: usize) -> (HjbQuery, entroproj::reference::oracle::OracleSolution) {
    let oracle = gaussian_oracle(spec, horizon).unwrap();
    let grid = TimeGrid::uniform(horizon, m).unwrap();
    let lam = oracle.discretize(&grid).unwrap();
    let q = HjbQuery::new(spec.clone(), grid, Arc::new(|_, x| x[0]), lam).unwrap();
    (q, oracle)
}

#[test]
fn gradient_tracks_case_two_activation() {
    let spec = SdeSpec::drifted_bm(1.0, 1.0, TimeProfile::polynomial(&[0.0, 2.0, -0.5]));
    let m = 200;
    let (mut q, oracle) = oracle_query(&spec, 1.0, m);
    q.mc_paths = 2_000;
    let dt = 1.0 / m as f64;
    for k in [0, 20, 60, 100, 150, 199] {
        let t = k as f64 * dt;
        let g = gradient_phi(&q, t, &[0.4]).unwrap();
        let expect = (oracle.grad_phi)(t);
        // Hat-basis discretization moves up to half a cell of density.
        let tol = (3.0 * g.se[0]).max(10.0 * q.fd_step * q.fd_step) + dt;
        assert!((g.value[0] - expect).abs() <= tol, "t={t}: {} vs {expect}", g.value[0]);
    }
}

#[test]
fn ou_potential_matches_gaussian_mgf() {
    // φ_0(x) = a E[Z_T] - a² Var(Z_T)/2 with Z_T = 1 + (x - 1)e^{-T} + noise.
    let horizon = 1.0;
    let grid = TimeGrid::uniform(horizon, 10).unwrap();
    let mut lam = vec![0.0; 11];
    lam[10] = 0.5;
    let mut q = HjbQuery::new(SdeSpec::ou(0.0, 0.0), grid, Arc::new(|_, x| x[0]), Multiplier::new(lam).unwrap()).unwrap();
    q.mc_paths = 100_000;
    let x = 0.3f64;
    let e = feynman_kac_phi(&q, 0.0, &[x]).unwrap();
    let mean = 1.0 + (x - 1.0) * (-horizon).exp();
    let var = 0.5 * (1.0 - (-2.0 * horizon).exp());
    let expect = 0.5 * mean - 0.125 * var;
    assert!((e.value - expect).abs() <= 3.0 * e.se, "{e:?} vs {expect}");
    let g = gradient_phi(&q, 0.0, &[x]).unwrap();
    assert!((g.value[0] - 0.5 * (-horizon).exp()).abs() < 1e-10);
}

#[test]
fn girsanov_matches_gibbs_density_on_case_one() {
    let spec = SdeSpec::drifted_bm(-0.5, 1.0, TimeProfile::polynomial(&[0.0, 1.0]));
    let (q, oracle) = oracle_query(&spec, 1.0, 200);
    let ens = sample_paths(&spec, &q.grid, 10_000, 31, &SamplingOptions::default()).unwrap();
    let g0 = oracle.grad_phi_at_zero;
    let grad = oracle.grad_phi_callback();
    let r = girsanov_density_check(&q, &move |x| g0 * x, &grad, &ens).unwrap();
    assert!(r.mean_abs_deviation <= 0.02, "{r:?}");
    assert!(r.correlation > 0.99);
}

#[test]
fn girsanov_deviation_is_first_order_in_the_mesh() {
    let spec = SdeSpec::drifted_bm(1.0, 1.0, TimeProfile::polynomial(&[0.0, 2.0, -0.5]));
    let mut dev = Vec::new();
    for m in [25, 50, 100] {
        let (q, oracle) = oracle_query(&spec, 1.0, m);
        let ens = sample_paths(&spec, &q.grid, 10_000, 8, &SamplingOptions::default()).unwrap();
        let g0 = oracle.grad_phi_at_zero;
        let grad = oracle.grad_phi_callback();
        dev.push(girsanov_density_check(&q, &move |x| g0 * x, &grad, &ens).unwrap().mean_abs_deviation);
    }
    for w in dev.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.5..=2.7).contains(&ratio), "{dev:?}");
    }
}

#[test]
fn zero_multiplier_gives_uniform_tilts() {
    let spec = SdeSpec::ou(0.0, 1.0);
    let grid = TimeGrid::uniform(1.0, 20).unwrap();
    let q = HjbQuery::new(spec.clone(), grid.clone(), Arc::new(|_, x| x[0]), Multiplier::zeros(21)).unwrap();
    let ens = sample_paths(&spec, &grid, 500, 2, &SamplingOptions::default()).unwrap();
    let r = girsanov_density_check(&q, &|_| 0.0, &|_, _, g: &mut [f64]| g[0] = 0.0, &ens).unwrap();
    assert_eq!(r.mean_abs_deviation, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn potential_increases_with_multiplier_mass(seed in 0u64..10_000, x in -2.0f64..2.0) {
        let mut rng = stream_rng(seed, 1);
        let grid = TimeGrid::uniform(1.0, 8).unwrap();
        let base: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..0.5)).collect();
        let mut more = base.clone();
        more[rng.random_range(0..9)] += rng.random_range(0.01..1.0);
        let psi: entroproj::hjb::TimeStateFn = Arc::new(|_, z| z[0] * z[0]);
        let mk = |l: Vec<f64>| {
            let mut q = HjbQuery::new(SdeSpec::ou(0.0, 0.0), grid.clone(), psi.clone(), Multiplier::new(l).unwrap()).unwrap();
            q.mc_paths = 400;
            q.seed = seed;
            q
        };
        let a = feynman_kac_phi(&mk(base), 0.0, &[x]).unwrap().value;
        let b = feynman_kac_phi(&mk(more), 0.0, &[x]).unwrap().value;
        prop_assert!(b > a);
    }
}
