//! The acceptance suite as library code, shared by the test target and the
//! `verify` subcommand.
//!
//! Every criterion is reproducible: seeds are fixed here, and parallel
//! reductions are chunked independently of the thread count.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::bridge::brute_force::{enumerated_marginals, primal_oracle};
use crate::bridge::{gaussian_profile, solve_constrained_bridge, BridgeConfig, MarkovReference};
use crate::constraints::{evaluate_psi_matrix, EndpointEquality, LinearConstraint, PsiMatrix};
use crate::dual_solver::{dual_gradient, gibbs_free_energy, solve_projected_ascent, DualConfig, GibbsSolution};
use crate::error::Result;
use crate::experiments::{
    condition_by_rejection, csiszar_bound_check, oracle_marginal, stability_sweep, ConditioningConfig,
};
use crate::hjb::{feynman_kac_phi, gradient_phi, HjbQuery};
use crate::measure::{Multiplier, PathEnsemble, TimeGrid};
use crate::reference::oracle::{gaussian_oracle, OracleCase};
use crate::reference::{corrected_sde_sample, mean_curve, sample_paths, SamplingOptions, SdeSpec, TimeProfile};
use crate::rng::stream_rng;

/// Number of acceptance criteria.
pub const CRITERIA: u8 = 11;

/// Criteria with no Monte Carlo dependence on sample luck.
pub const QUICK: [u8; 4] = [1, 4, 5, 6];

#[derive(Debug, Clone, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub metrics: BTreeMap<String, f64>,
    /// Wall-clock time; excluded from serialized results so reruns compare
    /// byte for byte.
    #[serde(skip)]
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<28} {}  {}",
            self.id,
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

struct Outcome {
    pass: bool,
    detail: String,
    metrics: BTreeMap<String, f64>,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>, metrics: &[(&str, f64)]) -> Self {
        Self {
            pass,
            detail: detail.into(),
            metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

pub fn criterion_name(id: u8) -> &'static str {
    match id {
        1 => "gaussian oracle regression",
        2 => "dual solver recovery",
        3 => "OU activation recovery",
        4 => "Gibbs identity",
        5 => "concavity and gradient",
        6 => "bridge enumeration",
        7 => "Feynman-Kac closed form",
        8 => "two-route consistency",
        9 => "stability identity",
        10 => "conditioning trend",
        11 => "determinism",
        _ => "unknown",
    }
}

/// Instances shared by several criteria.
pub mod instances {
    use super::*;

    /// `x₀ = -0.5`, `σ² = 1`, `m(t) = t`, `T = 1`.
    pub fn case_one() -> SdeSpec {
        SdeSpec::drifted_bm(-0.5, 1.0, TimeProfile::polynomial(&[0.0, 1.0]))
    }

    /// `x₀ = 1`, `σ² = 1`, `m(t) = 2t - t²/2`, `T = 1`.
    pub fn case_two() -> SdeSpec {
        SdeSpec::drifted_bm(1.0, 1.0, TimeProfile::polynomial(&[0.0, 2.0, -0.5]))
    }

    /// `x₀ = 1`, `σ² = 1`, `m ≡ 0`, `T = 1`.
    pub fn case_three() -> SdeSpec {
        SdeSpec::drifted_bm(1.0, 1.0, TimeProfile::polynomial(&[]))
    }

    /// The six Gaussian instances with their horizons: three drifted
    /// Brownian cases, then the OU cases.
    pub fn gaussian_cases() -> Vec<(&'static str, SdeSpec, f64)> {
        vec![
            ("bm-terminal", case_one(), 1.0),
            ("bm-interior", case_two(), 1.0),
            ("bm-initial", case_three(), 1.0),
            ("ou-terminal", SdeSpec::ou(0.5, 1.0), 0.3),
            ("ou-interior", SdeSpec::ou(0.5, 1.0), 2.5),
            ("ou-initial", SdeSpec::ou(2.0, 1.0), 1.0),
        ]
    }

    /// `S = 4`, `M = 3` random-walk bridge with interior mean constraint
    /// `E[X_j] ≤ shift`.
    pub fn bridge_miniature(shift: f64, center: f64) -> Result<(MarkovReference, EndpointEquality, Vec<f64>)> {
        let r = MarkovReference::gaussian_rw(4, -1.5, 1.5, 0.8, 3, vec![1.0, 2.0, 2.0, 1.0])?;
        let target = gaussian_profile(r.states(), center, 0.5)?;
        let t = EndpointEquality::new(target.clone(), target)?;
        let mut psi = r.psi_values(|x| x - shift);
        psi[..4].fill(0.0);
        psi[12..].fill(0.0);
        Ok((r, t, psi))
    }

    pub fn mean_constraint(ens: &PathEnsemble) -> Result<PsiMatrix> {
        evaluate_psi_matrix(ens, &LinearConstraint::linear_mean(0.0))
    }
}

use instances::*;

fn solve_on(spec: &SdeSpec, grid: &TimeGrid, n: usize, seed: u64) -> Result<(PathEnsemble, GibbsSolution)> {
    let ens = sample_paths(spec, grid, n, seed, &SamplingOptions::default())?;
    let psi = mean_constraint(&ens)?;
    let sol = solve_projected_ascent(&psi, &[], &DualConfig::default(), None)?;
    Ok((ens, sol))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn c1_oracle() -> Result<Outcome> {
    let tol = 1e-10;
    let o1 = gaussian_oracle(&case_one(), 1.0)?;
    let g_grid: Vec<f64> = (0..=100).map(|k| (o1.grad_phi)(k as f64 / 100.0)).collect();
    let g_err = g_grid.iter().map(|g| (g - 0.25).abs()).fold(0.0, f64::max);
    let case1 = o1.case == OracleCase::TerminalAtom
        && o1.atoms.len() == 1
        && close(o1.atoms[0].0, 1.0, tol)
        && close(o1.mass(), 0.25, tol)
        && g_err <= tol
        && close(o1.initial_mean, -0.75, tol)
        && close(o1.initial_var, 1.0, tol);

    let o3 = gaussian_oracle(&case_three(), 1.0)?;
    let case3 = o3.case == OracleCase::InitialAtom
        && o3.atoms.len() == 1
        && close(o3.mass(), 1.0, tol)
        && close(o3.atoms[0].0, 0.0, tol)
        && close(o3.atoms[0].1, 1.0, tol)
        && close(o3.initial_mean, 0.0, tol)
        && close(o3.initial_var, 1.0, tol);

    let o2 = gaussian_oracle(&case_two(), 1.0)?;
    let tau = o2.activation_time.unwrap_or(f64::NAN);
    let case2 = o2.case == OracleCase::InteriorActivation && close(tau, 3f64.sqrt() - 1.0, tol);
    Ok(Outcome::new(
        case1 && case2 && case3,
        format!("case1 mass {:.12}, case2 tau {:.12}, case3 atom {:?}", o1.mass(), tau, o3.atoms),
        &[("case1_mass", o1.mass()), ("case1_grad_err", g_err), ("case2_tau", tau), ("case3_atom0", o3.atoms[0].1)],
    ))
}

fn c2_dual_recovery() -> Result<Outcome> {
    let start = Instant::now();
    let grid = TimeGrid::uniform(1.0, 50)?;
    let (ens, sol) = solve_on(&case_one(), &grid, 20_000, 2024)?;
    let secs = start.elapsed().as_secs_f64();
    let m = grid.steps();
    let lam = sol.multiplier.atoms();
    let mass = sol.mass;
    let tail = (lam[m] + lam[m - 1]) / mass.max(f64::MIN_POSITIVE);
    let (t_mean, t_se) = sol.measure.mean_and_se(&ens.marginal(m, 0));
    let feas_ok = sol.gradient.iter().zip(&sol.standard_errors).all(|(g, se)| *g <= 3.0 * se);
    let slack = sol.kkt.max_slackness_residual;
    let pass = sol.converged
        && (mass - 0.25).abs() <= 0.025
        && tail >= 0.9
        && t_mean.abs() <= 3.0 * t_se
        && feas_ok
        && slack <= 1e-6 * (1.0 + mass)
        && secs <= 60.0;
    Ok(Outcome::new(
        pass,
        format!("mass {mass:.4}, last-two share {tail:.3}, terminal mean {t_mean:.2e} (SE {t_se:.2e}), slack {slack:.1e}"),
        &[
            ("mass", mass),
            ("tail_share", tail),
            ("terminal_mean", t_mean),
            ("terminal_se", t_se),
            ("slackness", slack),
            ("identity_residual", sol.max_identity_residual),
        ],
    ))
}

fn c3_ou_activation() -> Result<Outcome> {
    let spec = SdeSpec::ou(0.5, 1.0);
    let horizon = 2.5;
    let oracle = gaussian_oracle(&spec, horizon)?;
    let tau = oracle.activation_time.unwrap_or(f64::NAN);
    let m = 10;
    let grid = TimeGrid::uniform(horizon, m)?;
    let dt = horizon / m as f64;
    let (_, sol) = solve_on(&spec, &grid, 100_000, 77)?;
    let lam = sol.multiplier.atoms();
    // Interior nodes at least one cell past the activation time.
    let plateau: Vec<f64> =
        (1..m).filter(|&j| grid.nodes()[j] >= tau + dt - 1e-12).map(|j| lam[j] / dt).collect();
    let worst = plateau.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    let avg = plateau.iter().sum::<f64>() / plateau.len().max(1) as f64;
    // The terminal node also carries half a cell of density.
    let atom = lam[m] - 0.5 * dt;
    let pass = oracle.case == OracleCase::InteriorActivation
        && sol.converged
        && !plateau.is_empty()
        && worst <= 0.2
        && (atom - 1.0).abs() <= 0.15;
    Ok(Outcome::new(
        pass,
        format!(
            "tau {tau:.4}, {} plateau nodes, weight/dt in [{:.3}, {:.3}], terminal atom {atom:.3}",
            plateau.len(),
            plateau.iter().copied().fold(f64::INFINITY, f64::min),
            plateau.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        ),
        &[
            ("tau", tau),
            ("plateau_worst_rel_err", worst),
            ("plateau_mean", avg),
            ("terminal_atom", atom),
            ("identity_residual", sol.max_identity_residual),
        ],
    ))
}

fn c4_identity(prior: &[CriterionResult]) -> Result<Outcome> {
    // Own runs cover both families, including a nonzero f.
    let mut worst: f64 = 0.0;
    let mut runs = 0usize;
    for (spec, horizon, seed) in [(case_one(), 1.0, 5), (SdeSpec::ou(0.5, 1.0), 2.5, 6), (case_three(), 1.0, 7)] {
        let grid = TimeGrid::uniform(horizon, 20)?;
        let ens = sample_paths(&spec, &grid, 2_000, seed, &SamplingOptions::default())?;
        let psi = mean_constraint(&ens)?;
        let f: Vec<f64> = (0..2_000).map(|i| 0.1 * ens.state(i, 20)[0].powi(2)).collect();
        for fv in [&[][..], &f[..]] {
            let cfg = DualConfig { identity_tol: 1e-8, ..DualConfig::default() };
            let sol = solve_projected_ascent(&psi, fv, &cfg, None)?;
            worst = worst.max(sol.max_identity_residual);
            runs += 1;
        }
    }
    for r in prior {
        if let Some(v) = r.metrics.get("identity_residual") {
            worst = worst.max(*v);
            runs += 1;
        }
    }
    Ok(Outcome::new(
        worst <= 1e-8,
        format!("max residual {worst:.2e} over {runs} solves"),
        &[("max_identity_residual", worst), ("solves", runs as f64)],
    ))
}

fn random_psi(n: usize, m1: usize, seed: u64) -> Result<PsiMatrix> {
    let mut rng = stream_rng(seed, 0);
    PsiMatrix::new(n, m1, (0..n * m1).map(|_| rng.random_range(-2.0..2.0)).collect())
}

fn c5_concavity_gradient() -> Result<Outcome> {
    let mut rng = stream_rng(0xC0_5CA7E, 1);
    let mut worst_concave: f64 = f64::INFINITY;
    let mut concave_ok = 0;
    for k in 0..100 {
        let psi = random_psi(200, 5, 1000 + k)?;
        let a: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..3.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..3.0)).collect();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let g = |l: &[f64]| -> Result<f64> { Ok(gibbs_free_energy(&psi, &[], &Multiplier::new(l.to_vec())?)?.0) };
        let gap = g(&mid)? - 0.5 * (g(&a)? + g(&b)?);
        worst_concave = worst_concave.min(gap);
        if gap >= -1e-10 {
            concave_ok += 1;
        }
    }
    let mut worst_fd: f64 = 0.0;
    let mut fd_ok = 0;
    for k in 0..50 {
        let psi = random_psi(200, 5, 5000 + k)?;
        let f: Vec<f64> = (0..200).map(|i| 0.01 * i as f64).collect();
        let l: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..2.0)).collect();
        let g = |l: &[f64]| gibbs_free_energy(&psi, &f, &Multiplier::new(l.to_vec())?);
        let grad = dual_gradient(&psi, &g(&l)?.1);
        let h = 1e-5;
        let mut err: f64 = 0.0;
        for j in 0..5 {
            let (mut up, mut dn) = (l.clone(), l.clone());
            up[j] += h;
            dn[j] -= h;
            err = err.max(((g(&up)?.0 - g(&dn)?.0) / (2.0 * h) - grad[j]).abs());
        }
        worst_fd = worst_fd.max(err);
        if err <= 1e-6 {
            fd_ok += 1;
        }
    }
    Ok(Outcome::new(
        concave_ok == 100 && fd_ok == 50,
        format!("{concave_ok}/100 concavity (min gap {worst_concave:.1e}), {fd_ok}/50 gradient (max err {worst_fd:.1e})"),
        &[("concavity_min_gap", worst_concave), ("gradient_max_err", worst_fd)],
    ))
}

fn c6_bridge() -> Result<Outcome> {
    let mut value_err: f64 = 0.0;
    let mut marg_err: f64 = 0.0;
    let mut endpoint: f64 = 0.0;
    let mut slack: f64 = 0.0;
    let mut all_converged = true;
    for (shift, center) in [(0.0, 1.0), (0.2, 0.8), (-0.1, 0.3), (0.0, -0.5)] {
        let (r, t, psi) = bridge_miniature(shift, center)?;
        let sol = solve_constrained_bridge(&r, &t, &psi, &BridgeConfig::default())?;
        let oracle = primal_oracle(&r, &t, &psi)?;
        let (marg, _) = enumerated_marginals(&r, &sol.zeta0, &sol.zeta_t, &sol.multiplier, &psi)?;
        value_err = value_err.max((sol.value - oracle.value).abs());
        marg_err = marg_err.max(sol.marginals.iter().zip(&marg).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        endpoint = endpoint.max(sol.endpoint_error);
        slack = slack.max(sol.kkt.max_slackness_residual);
        all_converged &= sol.converged;
    }
    Ok(Outcome::new(
        all_converged && value_err <= 1e-6 && marg_err <= 1e-10 && endpoint <= 1e-8 && slack <= 1e-8,
        format!("entropy gap {value_err:.1e}, marginal gap {marg_err:.1e}, endpoint TV {endpoint:.1e}, slack {slack:.1e}"),
        &[("entropy_gap", value_err), ("marginal_gap", marg_err), ("endpoint_tv", endpoint), ("slackness", slack)],
    ))
}

fn c7_feynman_kac() -> Result<Outcome> {
    let grid = TimeGrid::uniform(1.0, 10)?;
    let mut lam = vec![0.0; 11];
    lam[10] = 0.25;
    let mut q = HjbQuery::new(
        SdeSpec::drifted_bm(0.0, 0.0, TimeProfile::polynomial(&[])),
        grid,
        Arc::new(|_, x| x[0]),
        Multiplier::new(lam)?,
    )?;
    q.mc_paths = 100_000;
    q.seed = 1707;
    let phi = feynman_kac_phi(&q, 0.0, &[0.0])?;
    let grad = gradient_phi(&q, 0.0, &[0.0])?;
    let tol = (3.0 * grad.se[0]).max(10.0 * q.fd_step * q.fd_step);
    let pass = (phi.value + 0.03125).abs() <= 3.0 * phi.se && (grad.value[0] - 0.25).abs() <= tol;
    Ok(Outcome::new(
        pass,
        format!("phi {:.5} (SE {:.1e}), grad {:.6}", phi.value, phi.se, grad.value[0]),
        &[("phi", phi.value), ("phi_se", phi.se), ("grad", grad.value[0]), ("grad_se", grad.se[0])],
    ))
}

fn c8_two_routes() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut worst_case = "";
    let mut identity: f64 = 0.0;
    for (k, (name, spec, horizon)) in gaussian_cases().into_iter().enumerate() {
        let grid = TimeGrid::uniform(horizon, 20)?;
        let (ens, sol) = solve_on(&spec, &grid, 20_000, 800 + k as u64)?;
        identity = identity.max(sol.max_identity_residual);
        let dual = mean_curve(&ens, &sol.measure);
        let oracle = gaussian_oracle(&spec, horizon)?;
        let grad = oracle.grad_phi_callback();
        let corrected = corrected_sde_sample(
            &spec,
            &grad,
            &oracle.tilted_initial(),
            &grid,
            20_000,
            900 + k as u64,
            &SamplingOptions::default(),
        )?;
        let sde = mean_curve(&corrected, &crate::measure::WeightedMeasure::uniform(20_000));
        for ((m1, s1), (m2, s2)) in dual.iter().zip(&sde) {
            let z = (m1 - m2).abs() / (s1 * s1 + s2 * s2).sqrt();
            if z > worst {
                worst = z;
                worst_case = name;
            }
        }
    }
    Ok(Outcome::new(
        worst <= 3.0,
        format!("largest gap {worst:.2} combined SE ({worst_case})"),
        &[("max_z", worst), ("identity_residual", identity)],
    ))
}

fn c9_stability() -> Result<Outcome> {
    let grid = TimeGrid::uniform(1.0, 50)?;
    let ens = sample_paths(&case_one(), &grid, 20_000, 2024, &SamplingOptions::default())?;
    let psi = mean_constraint(&ens)?;
    let eps: Vec<f64> = (0..=10).map(|k| k as f64 * 0.01).collect();
    let rep = stability_sweep(&psi, &eps, &DualConfig::default())?;
    let worst = rep.slopes.iter().map(|s| s.relative_error).fold(0.0, f64::max);
    let converged = rep.rows.iter().all(|r| r.converged);
    let bounded = rep.max_ratio.is_finite() && rep.max_ratio <= rep.c_stab * (1.0 + 1e-6) + 1e-9;
    Ok(Outcome::new(
        converged && rep.monotone && worst <= 0.05 && bounded,
        format!(
            "slope error {:.2}%, monotone {}, max H/eps {:.4} vs C_stab {:.4}",
            100.0 * worst,
            rep.monotone,
            rep.max_ratio,
            rep.c_stab
        ),
        &[("max_slope_rel_err", worst), ("max_ratio", rep.max_ratio), ("c_stab", rep.c_stab)],
    ))
}

fn c10_conditioning() -> Result<Outcome> {
    let start = Instant::now();
    let spec = case_one();
    let grid = TimeGrid::uniform(1.0, 10)?;
    let oracle = gaussian_oracle(&spec, 1.0)?;
    let c = LinearConstraint::linear_mean(0.0);
    let terminal = oracle_marginal(&spec, &oracle, 1.0)?;
    let mut w1 = Vec::new();
    let mut bound_ok = true;
    let mut metrics = Vec::new();
    for n in [4usize, 16, 64] {
        let cfg = ConditioningConfig { n, target_accepted: 1000, seed: 10 + n as u64, ..Default::default() };
        let row = condition_by_rejection(&spec, &grid, &c, &cfg, Some(&oracle))?;
        let check = csiszar_bound_check(&row, terminal, oracle.entropy)?;
        bound_ok &= check.pass && !check.inconclusive && row.accepted >= 500;
        let w = row.w1_terminal().unwrap_or(f64::NAN);
        w1.push(w);
        metrics.push((format!("w1_n{n}"), w));
        metrics.push((format!("csiszar_lhs_n{n}"), check.lhs));
        metrics.push((format!("csiszar_rhs_n{n}"), check.rhs));
    }
    let secs = start.elapsed().as_secs_f64();
    let trend = w1[0] > w1[1] && w1[1] > w1[2];
    let mut out = Outcome::new(
        trend && bound_ok && secs <= 300.0,
        format!("W1 {:.4} > {:.4} > {:.4}, Csiszar bound {}", w1[0], w1[1], w1[2], if bound_ok { "holds" } else { "fails" }),
        &[],
    );
    out.metrics = metrics.into_iter().collect();
    Ok(out)
}

fn c11_determinism() -> Result<Outcome> {
    let a = serde_json::to_string(&run_quick()).unwrap_or_default();
    let b = serde_json::to_string(&run_quick()).unwrap_or_default();
    Ok(Outcome::new(a == b && !a.is_empty(), format!("{} bytes, identical: {}", a.len(), a == b), &[]))
}

fn finish(id: u8, start: Instant, outcome: Result<Outcome>) -> CriterionResult {
    let (pass, detail, metrics) = match outcome {
        Ok(o) => (o.pass, o.detail, o.metrics),
        Err(e) => (false, format!("error: {e}"), BTreeMap::new()),
    };
    CriterionResult {
        id,
        name: criterion_name(id).to_string(),
        pass,
        detail,
        metrics,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs one criterion. Criterion 4 also aggregates the identity residuals
/// recorded in `prior`.
pub fn run_criterion(id: u8, prior: &[CriterionResult]) -> CriterionResult {
    let start = Instant::now();
    let outcome = match id {
        1 => c1_oracle(),
        2 => c2_dual_recovery(),
        3 => c3_ou_activation(),
        4 => c4_identity(prior),
        5 => c5_concavity_gradient(),
        6 => c6_bridge(),
        7 => c7_feynman_kac(),
        8 => c8_two_routes(),
        9 => c9_stability(),
        10 => c10_conditioning(),
        11 => c11_determinism(),
        _ => Err(crate::Error::InvalidInput(format!("no criterion {id}"))),
    };
    finish(id, start, outcome)
}

/// All criteria, in order. Criterion 4 runs last among the solver criteria
/// so it sees every recorded identity residual.
pub fn run_all() -> Vec<CriterionResult> {
    let mut out: Vec<CriterionResult> = Vec::new();
    for id in [1, 2, 3, 5, 6, 7, 8, 9, 10] {
        out.push(run_criterion(id, &[]));
    }
    let c4 = run_criterion(4, &out);
    out.push(c4);
    out.push(run_criterion(11, &[]));
    out.sort_by_key(|r| r.id);
    out
}

/// The deterministic subset.
pub fn run_quick() -> Vec<CriterionResult> {
    QUICK.iter().map(|&id| run_criterion(id, &[])).collect()
}
