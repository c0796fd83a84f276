use entroproj::reference::oracle::gaussian_oracle;
use entroproj::reference::{corrected_sde_sample, mean_curve, SamplingOptions, SdeSpec, TimeProfile};
use entroproj::{TimeGrid, WeightedMeasure};

fn six_cases() -> Vec<(SdeSpec, f64)> {
    vec![
        (SdeSpec::drifted_bm(-0.5, 1.0, TimeProfile::polynomial(&[0.0, 1.0])), 1.0),
        (SdeSpec::drifted_bm(1.0, 1.0, TimeProfile::polynomial(&[0.0, 2.0, -0.5])), 1.0),
        (SdeSpec::drifted_bm(1.0, 1.0, TimeProfile::polynomial(&[])), 1.0),
        (SdeSpec::ou(0.5, 1.0), 0.3),
        (SdeSpec::ou(0.5, 1.0), 2.5),
        (SdeSpec::ou(2.0, 1.0), 1.0),
    ]
}

#[test]
fn corrected_sde_reproduces_oracle_mean_curves() {
    let n = 20_000;
    for (k, (spec, horizon)) in six_cases().into_iter().enumerate() {
        let sol = gaussian_oracle(&spec, horizon).unwrap();
        let grid = TimeGrid::uniform(horizon, 20).unwrap();
        let grad = sol.grad_phi_callback();
        let ens = corrected_sde_sample(
            &spec,
            &grad,
            &sol.tilted_initial(),
            &grid,
            n,
            100 + k as u64,
            &SamplingOptions::default(),
        )
        .unwrap();
        let curve = mean_curve(&ens, &WeightedMeasure::uniform(n));
        for (j, (mean, se)) in curve.iter().enumerate() {
            let t = grid.nodes()[j];
            let expect = (sol.mean_curve)(t);
            assert!(
                (mean - expect).abs() <= 3.0 * se,
                "case {:?} t={t}: {mean} vs {expect} (se {se})",
                sol.case
            );
        }
    }
}

#[test]
fn case_one_corrected_mean_is_linear() {
    let spec = SdeSpec::drifted_bm(-0.5, 1.0, TimeProfile::polynomial(&[0.0, 1.0]));
    let sol = gaussian_oracle(&spec, 1.0).unwrap();
    assert!(((sol.grad_phi)(0.3) - 0.25).abs() < 1e-15);
    let grid = TimeGrid::uniform(1.0, 10).unwrap();
    let n = 40_000;
    let grad = sol.grad_phi_callback();
    let ens = corrected_sde_sample(&spec, &grad, &sol.tilted_initial(), &grid, n, 7, &SamplingOptions::default())
        .unwrap();
    for (j, (mean, se)) in mean_curve(&ens, &WeightedMeasure::uniform(n)).iter().enumerate() {
        let t = grid.nodes()[j];
        assert!((mean - (-0.75 + 0.75 * t)).abs() <= 3.5 * se, "t={t}");
    }
}
