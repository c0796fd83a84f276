use std::sync::Arc;

use entroproj::bridge::{gaussian_profile, solve_constrained_bridge, MarkovReference};
use entroproj::constraints::{evaluate_psi_matrix, EndpointEquality, PsiMatrix};
use entroproj::dual_solver::{solve_projected_ascent, GibbsSolution, KktReport};
use entroproj::experiments::{
    condition_by_rejection, csiszar_bound_check, oracle_marginal, stability_sweep, weak_stability_run,
    ConditioningConfig,
};
use entroproj::hjb::{feynman_kac_phi, gradient_phi, HjbQuery, TimeStateFn};
use entroproj::reference::oracle::{gaussian_oracle, OracleSolution};
use entroproj::reference::{mean_curve, sample_paths};
use entroproj::rng::derive_seed;
use entroproj::verify::{run_all, run_quick};
use entroproj::{Multiplier, PathEnsemble};
use serde::Serialize;
use serde_json::json;

use crate::config::{ConstraintConfig, RunConfig};
use crate::diagnostic::{Diagnostic, EXIT_FAILURE, EXIT_NOT_CONVERGED, EXIT_OK};
use crate::output::{Cell, Output};

/// Outcome of a command that ran to completion and wrote its results.
pub struct Completed {
    pub exit_code: i32,
    pub status: &'static str,
}

impl Completed {
    fn ok() -> Self {
        Self { exit_code: EXIT_OK, status: "ok" }
    }

    fn converged(flag: bool) -> Self {
        if flag {
            Self::ok()
        } else {
            Self { exit_code: EXIT_NOT_CONVERGED, status: "not_converged" }
        }
    }
}

type CmdResult = Result<Completed, Diagnostic>;

/// The Gaussian oracle applies to the mean constraint `E[X_t] ≤ 0` only.
fn oracle_if_applicable(cfg: &RunConfig) -> Option<OracleSolution> {
    let inst = cfg.instance.as_ref()?;
    match cfg.constraint {
        ConstraintConfig::LinearMean { c: 0.0 } => gaussian_oracle(&inst.spec(), inst.horizon).ok(),
        _ => None,
    }
}

fn sample(cfg: &RunConfig) -> Result<(PathEnsemble, PsiMatrix), Diagnostic> {
    let inst = cfg.instance()?;
    let ens = sample_paths(&inst.spec(), &inst.grid()?, cfg.sampling.paths, cfg.seed, &cfg.sampling.options())?;
    let psi = evaluate_psi_matrix(&ens, &cfg.constraint.build())?;
    Ok((ens, psi))
}

pub fn oracle(cfg: &RunConfig, out: &mut Output) -> CmdResult {
    let inst = cfg.instance()?;
    if !matches!(cfg.constraint, ConstraintConfig::LinearMean { c: 0.0 }) {
        return Err(Diagnostic::validation("closed forms exist for the constraint E[X_t] <= 0 only").with_field("constraint"));
    }
    let grid = inst.grid()?;
    let o = gaussian_oracle(&inst.spec(), inst.horizon)?;
    let report = o.report(&grid)?;
    out.json(
        "results.json",
        &json!({
            "case": report.case,
            "multiplier": report.atoms,
            "density_interval": report.density_interval,
            "activation_time": report.activation_time,
            "mass": o.mass(),
            "initial_law": [report.initial_mean, report.initial_var],
            "entropy": report.entropy,
            "report": report,
        }),
    )?;
    let rows = (0..report.grid.len())
        .map(|j| {
            vec![
                Cell::F(report.grid[j]),
                Cell::F(report.multiplier[j]),
                Cell::F(report.grad_phi[j]),
                Cell::F(report.mean_curve[j]),
            ]
        })
        .collect();
    out.csv("results.csv", &["t", "multiplier", "grad_phi", "mean"], rows)?;
    out.series(
        "series.csv",
        &[("multiplier", &report.grid, &report.multiplier), ("grad_phi", &report.grid, &report.grad_phi), ("mean", &report.grid, &report.mean_curve)],
    )?;
    out.line(format!("case {} oracle", report.case));
    out.line(format!("multiplier atoms {:?}", report.atoms));
    if let Some((a, b)) = report.density_interval {
        out.line(format!("density on [{a}, {b}]"));
    }
    out.line(format!("total mass {}", o.mass()));
    out.line(format!("initial law N({}, {})", report.initial_mean, report.initial_var));
    out.line(format!("relative entropy {}", report.entropy));
    Ok(Completed::ok())
}

#[derive(Serialize)]
struct DualSummary<'a> {
    multiplier: &'a Multiplier,
    mass: f64,
    dual_value: f64,
    primal_value: f64,
    objective: f64,
    kkt: &'a KktReport,
    gradient: &'a [f64],
    standard_errors: &'a [f64],
    iterations: usize,
    outer_iterations: usize,
    converged: bool,
    stationary_only: bool,
    max_identity_residual: f64,
    effective_sample_size: f64,
    warnings: &'a [String],
}

impl<'a> From<&'a GibbsSolution> for DualSummary<'a> {
    fn from(s: &'a GibbsSolution) -> Self {
        Self {
            multiplier: &s.multiplier,
            mass: s.mass,
            dual_value: s.dual_value,
            primal_value: s.primal_value,
            objective: s.objective,
            kkt: &s.kkt,
            gradient: &s.gradient,
            standard_errors: &s.standard_errors,
            iterations: s.iterations,
            outer_iterations: s.outer_iterations,
            converged: s.converged,
            stationary_only: s.stationary_only,
            max_identity_residual: s.max_identity_residual,
            effective_sample_size: s.effective_sample_size,
            warnings: &s.warnings,
        }
    }
}

pub fn solve_dual(cfg: &RunConfig, out: &mut Output) -> CmdResult {
    let (ens, psi) = sample(cfg)?;
    out.record_seed("paths", cfg.seed);
    let sol = solve_projected_ascent(&psi, &[], &cfg.solver, None)?;
    out.json("results.json", &DualSummary::from(&sol))?;
    let nodes = ens.grid().nodes().to_vec();
    let means = mean_curve(&ens, &sol.measure);
    let rows = (0..nodes.len())
        .map(|j| {
            vec![
                Cell::F(nodes[j]),
                Cell::F(sol.multiplier.atoms()[j]),
                Cell::F(sol.gradient[j]),
                Cell::F(sol.standard_errors[j]),
                Cell::F(means[j].0),
                Cell::F(means[j].1),
            ]
        })
        .collect();
    out.csv("results.csv", &["t", "multiplier", "constraint_mean", "constraint_se", "state_mean", "state_se"], rows)?;
    let trace = sol
        .trace
        .iter()
        .map(|r| {
            vec![Cell::U(r.iter as u64), Cell::F(r.dual_value), Cell::F(r.grad_norm), Cell::F(r.mass), Cell::F(r.identity_residual)]
        })
        .collect();
    out.csv("trace.csv", &["iter", "dual_value", "grad_norm", "mass", "identity_residual"], trace)?;
    let mean_values: Vec<f64> = means.iter().map(|m| m.0).collect();
    out.series("series.csv", &[("multiplier", &nodes, sol.multiplier.atoms()), ("state_mean", &nodes, &mean_values)])?;
    out.line(format!("converged {} after {} iterations", sol.converged, sol.iterations));
    out.line(format!("multiplier mass {}", sol.mass));
    out.line(format!("entropy {}  dual value {}", sol.primal_value, sol.dual_value));
    out.line(format!(
        "max violation {:e}  slackness {:e}  identity residual {:e}",
        sol.kkt.max_violation, sol.kkt.max_slackness_residual, sol.max_identity_residual
    ));
    out.line(format!("effective sample size {}", sol.effective_sample_size));
    for w in &sol.warnings {
        out.line(format!("warning: {w}"));
    }
    Ok(Completed::converged(sol.converged))
}

pub fn bridge(cfg: &RunConfig, out: &mut Output) -> CmdResult {
    let b = cfg.block(&cfg.bridge, "bridge")?;
    let init = b.init.clone().unwrap_or_else(|| vec![1.0; b.states]);
    let r = MarkovReference::gaussian_rw(b.states, b.x_min, b.x_max, b.step_var, b.steps, init)?;
    let targets = EndpointEquality::new(
        gaussian_profile(r.states(), b.initial.mean, b.initial.var)?,
        gaussian_profile(r.states(), b.terminal.mean, b.terminal.var)?,
    )?;
    let mut psi = r.psi_values(|x| cfg.constraint.eval(x));
    if b.interior_only {
        let s = r.size();
        psi[..s].fill(0.0);
        psi[b.steps * s..].fill(0.0);
    }
    let sol = solve_constrained_bridge(&r, &targets, &psi, &b.solver)?;
    out.json("results.json", &sol)?;
    let s = r.size();
    let mut rows = Vec::new();
    for j in 0..=b.steps {
        for (k, x) in r.states().iter().enumerate() {
            rows.push(vec![Cell::U(j as u64), Cell::F(*x), Cell::F(sol.marginals[j * s + k])]);
        }
    }
    out.csv("marginals.csv", &["node", "state", "probability"], rows)?;
    let lam = (0..=b.steps).map(|j| vec![Cell::U(j as u64), Cell::F(sol.multiplier.atoms()[j]), Cell::F(sol.gradient[j])]).collect();
    out.csv("results.csv", &["node", "multiplier", "constraint_mean"], lam)?;
    out.line(format!("converged {} after {} iterations, {} sweeps", sol.converged, sol.iterations, sol.sweeps));
    out.line(format!("relative entropy {}", sol.value));
    out.line(format!("multiplier {:?}", sol.multiplier.atoms()));
    out.line(format!("endpoint error {:e}  slackness {:e}", sol.endpoint_error, sol.kkt.max_slackness_residual));
    Ok(Completed::converged(sol.converged))
}

pub fn hjb(cfg: &RunConfig, out: &mut Output) -> CmdResult {
    let inst = cfg.instance()?;
    let h = cfg.block(&cfg.hjb, "hjb")?;
    let grid = inst.grid()?;
    let lambda = match &h.multiplier {
        Some(m) => {
            if m.len() != grid.len() {
                return Err(Diagnostic::validation(format!("expected {} node weights, got {}", grid.len(), m.len()))
                    .with_field("hjb.multiplier"));
            }
            Multiplier::new(m.clone())?
        }
        None => match oracle_if_applicable(cfg) {
            Some(o) => o.discretize(&grid)?,
            None => {
                return Err(Diagnostic::validation("no closed-form multiplier for this instance; set hjb.multiplier")
                    .with_field("hjb.multiplier"))
            }
        },
    };
    let constraint = cfg.constraint.clone();
    let psi: TimeStateFn = Arc::new(move |_, x| constraint.eval(x[0]));
    let mut q = HjbQuery::new(inst.spec(), grid, psi, lambda)?;
    q.mc_paths = h.mc_paths;
    q.fd_step = h.fd_step;
    q.seed = cfg.seed;
    q.sampling = cfg.sampling.options();
    out.record_seed("feynman_kac", cfg.seed);
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for p in &h.points {
        let phi = feynman_kac_phi(&q, p.t, &[p.x])?;
        let g = gradient_phi(&q, p.t, &[p.x])?;
        rows.push(vec![Cell::F(p.t), Cell::F(p.x), Cell::F(phi.value), Cell::F(phi.se), Cell::F(g.value[0]), Cell::F(g.se[0])]);
        records.push(json!({"t": p.t, "x": p.x, "phi": phi, "grad_phi": g}));
        out.line(format!("phi({}, {}) = {} (SE {:e}), grad {} (SE {:e})", p.t, p.x, phi.value, phi.se, g.value[0], g.se[0]));
    }
    out.json("results.json", &json!({ "multiplier": q.lambda, "points": records }))?;
    out.csv("results.csv", &["t", "x", "phi", "phi_se", "grad", "grad_se"], rows)?;
    Ok(Completed::ok())
}

pub fn condition(cfg: &RunConfig, out: &mut Output) -> CmdResult {
    let inst = cfg.instance()?;
    let c = cfg.block(&cfg.condition, "condition")?;
    let spec = inst.spec();
    let grid = inst.grid()?;
    let oracle = oracle_if_applicable(cfg);
    let terminal = match &oracle {
        Some(o) => Some(oracle_marginal(&spec, o, inst.horizon)?),
        None => None,
    };
    let constraint = cfg.constraint.build();
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &n in &c.ns {
        let seed = derive_seed(cfg.seed, n as u64);
        out.record_seed(format!("n={n}"), seed);
        let cc = ConditioningConfig {
            n,
            target_accepted: c.target_accepted,
            eps: c.eps,
            seed,
            max_blocks: c.max_blocks,
            batch_blocks: c.batch_blocks,
        };
        let row = condition_by_rejection(&spec, &grid, &constraint, &cc, oracle.as_ref())?;
        let check = match (&oracle, terminal) {
            (Some(o), Some(t)) => Some(csiszar_bound_check(&row, t, o.entropy)?),
            _ => None,
        };
        let w1 = row.w1_terminal();
        rows.push(vec![
            Cell::U(n as u64),
            Cell::U(row.accepted as u64),
            Cell::U(row.drawn as u64),
            Cell::F(row.acceptance_rate),
            Cell::F(w1.unwrap_or(f64::NAN)),
            Cell::F(check.as_ref().map_or(f64::NAN, |k| k.lhs)),
            Cell::F(check.as_ref().map_or(f64::NAN, |k| k.rhs)),
            Cell::F(check.as_ref().map_or(f64::NAN, |k| k.error_estimate)),
            Cell::S(check.as_ref().map_or("n/a".into(), |k| if k.inconclusive { "inconclusive".into() } else { k.pass.to_string() })),
        ]);
        out.line(format!(
            "N={n}: {} accepted of {} blocks (rate {:e}), terminal W1 {}",
            row.accepted,
            row.drawn,
            row.acceptance_rate,
            w1.map_or("n/a".to_string(), |w| w.to_string())
        ));
        if let Some(k) = &check {
            out.line(format!("  Csiszar bound: {} <= {} + 3*{} -> {}", k.lhs, k.rhs, k.error_estimate, k.pass));
        }
        records.push(json!({ "row": row, "csiszar": check }));
    }
    out.json("results.json", &records)?;
    out.csv(
        "results.csv",
        &["n", "accepted", "drawn", "acceptance_rate", "w1_terminal", "csiszar_lhs", "csiszar_rhs", "csiszar_error", "csiszar_pass"],
        rows,
    )?;
    Ok(Completed::ok())
}

pub fn stability(cfg: &RunConfig, out: &mut Output) -> CmdResult {
    let s = cfg.block(&cfg.stability, "stability")?;
    let (_, psi) = sample(cfg)?;
    out.record_seed("paths", cfg.seed);
    let rep = stability_sweep(&psi, &s.eps, &cfg.solver)?;
    out.json("results.json", &rep)?;
    let rows = rep
        .rows
        .iter()
        .map(|r| vec![Cell::F(r.eps), Cell::F(r.value), Cell::F(r.mass), Cell::F(r.relative_entropy_to_base), Cell::B(r.converged)])
        .collect();
    out.csv("results.csv", &["eps", "entropy", "mass", "entropy_to_base", "converged"], rows)?;
    let slopes = rep
        .slopes
        .iter()
        .map(|k| vec![Cell::F(k.eps_lo), Cell::F(k.eps_hi), Cell::F(k.fd_slope), Cell::F(k.midpoint_mass), Cell::F(k.relative_error)])
        .collect();
    out.csv("slopes.csv", &["eps_lo", "eps_hi", "fd_slope", "midpoint_mass", "relative_error"], slopes)?;
    for r in &rep.rows {
        out.line(format!("eps {}: entropy {} mass {}", r.eps, r.value, r.mass));
    }
    out.line(format!("monotone {}  max H/eps {}  C_stab {}", rep.monotone, rep.max_ratio, rep.c_stab));
    Ok(Completed::converged(rep.rows.iter().all(|r| r.converged)))
}

pub fn weak_stability(cfg: &RunConfig, out: &mut Output) -> CmdResult {
    let w = cfg.block(&cfg.weak_stability, "weak_stability")?;
    let (ens, psi) = sample(cfg)?;
    out.record_seed("paths", cfg.seed);
    let (base, rows) = weak_stability_run(&ens, &psi, w.perturbation, &w.ks, &cfg.solver)?;
    out.json("results.json", &json!({ "base": DualSummary::from(&base), "rows": rows }))?;
    let table = rows
        .iter()
        .map(|r| vec![Cell::U(r.k as u64), Cell::F(r.w1), Cell::F(r.mass), Cell::B(r.converged)])
        .collect();
    out.csv("results.csv", &["k", "w1", "mass", "converged"], table)?;
    out.line(format!("base mass {}", base.mass));
    for r in &rows {
        out.line(format!("k {}: W1 {} mass {}", r.k, r.w1, r.mass));
    }
    Ok(Completed::converged(base.converged && rows.iter().all(|r| r.converged)))
}

pub fn verify(quick: bool, out: &mut Output) -> CmdResult {
    let results = if quick { run_quick() } else { run_all() };
    out.json("results.json", &results)?;
    let rows = results
        .iter()
        .map(|r| vec![Cell::U(r.id as u64), Cell::S(r.name.clone()), Cell::B(r.pass)])
        .collect();
    out.csv("results.csv", &["criterion", "name", "pass"], rows)?;
    for r in &results {
        out.line(r.line());
    }
    let pass = results.iter().all(|r| r.pass);
    Ok(if pass { Completed::ok() } else { Completed { exit_code: EXIT_FAILURE, status: "criteria_failed" } })
}
