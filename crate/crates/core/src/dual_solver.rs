//! Maximisation of the Gibbs free energy
//! `G(λ) = -log ⟨ν, exp(-f - Σ_j λ_j ψ_j)⟩` over nonnegative node multipliers.
//!
//! `G` is concave with gradient `∂G/∂λ_j = ⟨μ_λ, ψ_j⟩`, where `μ_λ` is the
//! tilted particle measure. The maximiser gives the constrained entropy
//! minimiser `μ̄ = μ_λ̄`. Around it sit an outer fixed-point loop for
//! mean-field energies and nonlinear constraints, KKT diagnostics, and the
//! primal–dual identity `G(λ) = H(μ_λ|ν) + ⟨μ_λ, f⟩ + Σ_j λ_j ⟨μ_λ, ψ_j⟩`.

use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::constraints::{
    constraint_standard_errors, constraint_violation, linearize_nonlinear, Marginal, NonlinearConstraint, PsiMatrix,
};
use crate::error::{Error, Result};
use crate::measure::{Multiplier, PathEnsemble, WeightedMeasure};
use crate::numeric::par_sum;

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// Solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualConfig {
    /// Initial trial step; later trial steps are Barzilai–Borwein.
    pub step_size: f64,
    pub max_iters: usize,
    /// Tolerance on `‖λ - max(0, λ + ∇G)‖_∞`.
    pub grad_tol: f64,
    /// Feasibility tolerance; `None` means `max(1e-8, 3 max_j SE_j)`.
    pub feas_tol: Option<f64>,
    pub slack_tol: f64,
    pub outer_max: usize,
    pub outer_damping: f64,
    /// Total-variation tolerance of the outer fixed point.
    pub outer_tol: f64,
    pub mass_cap: Option<f64>,
    /// Relative tolerance of the primal–dual identity.
    pub identity_tol: f64,
    /// Warn when the effective sample size falls below this fraction of N.
    pub ess_warn_fraction: f64,
    /// Run non-convex instances, reporting a stationary point only.
    pub allow_nonconvex: bool,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            max_iters: 5000,
            grad_tol: 1e-9,
            feas_tol: None,
            slack_tol: 1e-6,
            outer_max: 200,
            outer_damping: 1.0,
            outer_tol: 1e-8,
            mass_cap: None,
            identity_tol: 1e-8,
            ess_warn_fraction: 0.01,
            allow_nonconvex: false,
        }
    }
}

impl DualConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("step_size", self.step_size),
            ("grad_tol", self.grad_tol),
            ("slack_tol", self.slack_tol),
            ("outer_tol", self.outer_tol),
            ("identity_tol", self.identity_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(f) = self.feas_tol {
            if !(f > 0.0) {
                return Err(Error::InvalidInput(format!("feas_tol must be positive, got {f}")));
            }
        }
        if !(self.outer_damping > 0.0 && self.outer_damping <= 1.0) {
            return Err(Error::InvalidInput("outer_damping must lie in (0, 1]".into()));
        }
        if self.max_iters == 0 || self.outer_max == 0 {
            return Err(Error::InvalidInput("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

/// KKT diagnostics at the returned multiplier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktReport {
    /// `max(0, sup_j g_j)`.
    pub max_violation: f64,
    /// `max_j min(λ_j, |g_j|)`.
    pub max_slackness_residual: f64,
    pub feas_tol: f64,
    pub slack_tol: f64,
    pub feasible: bool,
    pub slack_ok: bool,
}

/// One accepted ascent iterate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub dual_value: f64,
    pub grad_norm: f64,
    pub mass: f64,
    pub identity_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GibbsSolution {
    pub multiplier: Multiplier,
    pub measure: WeightedMeasure,
    /// `G(λ̄)`.
    pub dual_value: f64,
    /// Right-hand side of the primal–dual identity at `λ̄`.
    pub primal_value: f64,
    /// `H(μ̄|ν) + F(μ̄)`; equals `H(μ̄|ν)` without an interaction energy.
    pub objective: f64,
    pub kkt: KktReport,
    /// `g_j = ⟨μ̄, ψ_j⟩`.
    pub gradient: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub mass: f64,
    pub converged: bool,
    /// Largest identity residual over all evaluated iterates.
    pub max_identity_residual: f64,
    /// Set for non-convex instances: necessary conditions only.
    pub stationary_only: bool,
    pub effective_sample_size: f64,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl GibbsSolution {
    /// `Err(NotConverged)` unless the ascent converged.
    pub fn ensure_converged(&self) -> Result<()> {
        if self.converged {
            Ok(())
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
                detail: format!(
                    "projected gradient residual {:.3e}",
                    self.trace.last().map_or(f64::NAN, |r| r.grad_norm)
                ),
            })
        }
    }

    /// JSON-ready report.
    pub fn report(&self, config: &DualConfig, nodes: &[f64]) -> DualReport {
        DualReport {
            config: config.clone(),
            iterations: self.iterations,
            outer_iterations: self.outer_iterations,
            converged: self.converged,
            dual_value: self.dual_value,
            primal_value: self.primal_value,
            objective: self.objective,
            mass: self.mass,
            kkt: self.kkt.clone(),
            max_identity_residual: self.max_identity_residual,
            stationary_only: self.stationary_only,
            effective_sample_size: self.effective_sample_size,
            multiplier: self
                .multiplier
                .atoms()
                .iter()
                .enumerate()
                .map(|(j, w)| NodeWeight { node: j, t: nodes.get(j).copied().unwrap_or(f64::NAN), weight: *w })
                .collect(),
            gradient: self.gradient.clone(),
            standard_errors: self.standard_errors.clone(),
            warnings: self.warnings.clone(),
        }
    }

    /// Per-iteration trace as CSV `iter,G,grad_norm,mass,identity_residual`.
    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "iter,G,grad_norm,mass,identity_residual")?;
        for r in &self.trace {
            writeln!(out, "{},{:e},{:e},{:e},{:e}", r.iter, r.dual_value, r.grad_norm, r.mass, r.identity_residual)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeWeight {
    pub node: usize,
    pub t: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DualReport {
    pub config: DualConfig,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub converged: bool,
    pub dual_value: f64,
    pub primal_value: f64,
    pub objective: f64,
    pub mass: f64,
    pub kkt: KktReport,
    pub max_identity_residual: f64,
    pub stationary_only: bool,
    pub effective_sample_size: f64,
    pub multiplier: Vec<NodeWeight>,
    pub gradient: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub warnings: Vec<String>,
}

fn check_dims(psi: &PsiMatrix, f_derivative: &[f64], lambda: usize) -> Result<()> {
    if !f_derivative.is_empty() && f_derivative.len() != psi.rows() {
        return Err(Error::InvalidInput(format!(
            "f_derivative has {} entries for {} particles",
            f_derivative.len(),
            psi.rows()
        )));
    }
    if lambda != psi.cols() {
        return Err(Error::InvalidInput(format!("multiplier has {lambda} nodes, constraint matrix {}", psi.cols())));
    }
    Ok(())
}

fn potential(psi: &PsiMatrix, f_derivative: &[f64], lambda: &[f64]) -> Vec<f64> {
    let mut v = psi.contract(lambda);
    if !f_derivative.is_empty() {
        for (a, f) in v.iter_mut().zip(f_derivative) {
            *a += f;
        }
    }
    v
}

/// `G(λ)` and the tilted measure `μ_λ`. An empty `f_derivative` means `f ≡ 0`.
pub fn gibbs_free_energy(
    psi: &PsiMatrix,
    f_derivative: &[f64],
    lambda: &Multiplier,
) -> Result<(f64, WeightedMeasure)> {
    check_dims(psi, f_derivative, lambda.len())?;
    let mu = WeightedMeasure::tilt(&potential(psi, f_derivative, lambda.atoms()))?;
    Ok((-mu.log_normalizer(), mu))
}

/// `∂G/∂λ_j = ⟨μ, ψ_j⟩`.
pub fn dual_gradient(psi: &PsiMatrix, measure: &WeightedMeasure) -> Vec<f64> {
    constraint_violation(psi, measure).0
}

/// Right-hand side `H(μ|ν) + ⟨μ, f⟩ + Σ_j λ_j g_j` of the identity.
fn identity_rhs(f_derivative: &[f64], lambda: &[f64], mu: &WeightedMeasure, g: &[f64]) -> f64 {
    let h = mu.relative_entropy();
    let f = if f_derivative.is_empty() { 0.0 } else { mu.expectation(|i| f_derivative[i]) };
    let pair: f64 = lambda.iter().zip(g).map(|(l, gj)| l * gj).sum();
    h + f + pair
}

fn identity_scale(g_value: f64) -> f64 {
    1.0f64.max(g_value.abs())
}

/// Evaluate the identity `G(λ) = H(μ_λ|ν) + ⟨μ_λ, f⟩ + Σ λ_j ⟨μ_λ, ψ_j⟩` at
/// the solution and return its right-hand side.
pub fn primal_value(solution: &GibbsSolution, psi: &PsiMatrix, f_derivative: &[f64], identity_tol: f64) -> Result<f64> {
    let (g_value, mu) = gibbs_free_energy(psi, f_derivative, &solution.multiplier)?;
    let g = dual_gradient(psi, &mu);
    let rhs = identity_rhs(f_derivative, solution.multiplier.atoms(), &mu, &g);
    let residual = (rhs - g_value).abs();
    if residual > identity_tol * identity_scale(g_value) {
        return Err(Error::IdentityViolation(format!("|RHS - G| = {residual:e} at G = {g_value}")));
    }
    Ok(rhs)
}

struct Iterate {
    lambda: Vec<f64>,
    value: f64,
    measure: WeightedMeasure,
    grad: Vec<f64>,
    identity_residual: f64,
}

struct Evaluator<'a> {
    psi: &'a PsiMatrix,
    f: &'a [f64],
    identity_tol: f64,
    max_identity_residual: f64,
    evaluations: usize,
}

impl Evaluator<'_> {
    fn eval(&mut self, lambda: Vec<f64>) -> Result<Iterate> {
        let mu = WeightedMeasure::tilt(&potential(self.psi, self.f, &lambda))?;
        let value = -mu.log_normalizer();
        let grad = dual_gradient(self.psi, &mu);
        let rhs = identity_rhs(self.f, &lambda, &mu, &grad);
        let identity_residual = (rhs - value).abs();
        self.evaluations += 1;
        self.max_identity_residual = self.max_identity_residual.max(identity_residual);
        if identity_residual > self.identity_tol * identity_scale(value) {
            return Err(Error::IdentityViolation(format!(
                "|H + <f> + Σλg - G| = {identity_residual:e} at G = {value}"
            )));
        }
        Ok(Iterate { lambda, value, measure: mu, grad, identity_residual })
    }
}

fn projected_residual(lambda: &[f64], grad: &[f64]) -> f64 {
    lambda.iter().zip(grad).map(|(l, g)| (l - (l + g).max(0.0)).abs()).fold(0.0, f64::max)
}

fn mass_of(lambda: &[f64]) -> f64 {
    crate::numeric::compensated_sum(lambda.iter().copied())
}

/// Projected gradient ascent on `G` with Armijo backtracking.
///
/// Trial steps after the first are Barzilai–Borwein lengths, and every step
/// is backtracked until `G(λ + t d) ≥ G(λ) + c t ⟨∇G, d⟩` with
/// `d = max(0, λ + α∇G) - λ`. Once `G` stops changing within rounding, a
/// step is also accepted if it reduces the projected-gradient residual.
pub fn solve_projected_ascent(
    psi: &PsiMatrix,
    f_derivative: &[f64],
    cfg: &DualConfig,
    warm_start: Option<&Multiplier>,
) -> Result<GibbsSolution> {
    cfg.validate()?;
    let m1 = psi.cols();
    let start = warm_start.map_or_else(|| vec![0.0; m1], |w| w.atoms().to_vec());
    check_dims(psi, f_derivative, start.len())?;
    let mut ev = Evaluator {
        psi,
        f: f_derivative,
        identity_tol: cfg.identity_tol,
        max_identity_residual: 0.0,
        evaluations: 0,
    };
    let mut cur = ev.eval(start)?;
    let mut alpha = cfg.step_size;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut res = projected_residual(&cur.lambda, &cur.grad);

    for iter in 0..=cfg.max_iters {
        let mass = mass_of(&cur.lambda);
        trace.push(TraceRow {
            iter,
            dual_value: cur.value,
            grad_norm: res,
            mass,
            identity_residual: cur.identity_residual,
        });
        if let Some(cap) = cfg.mass_cap {
            if mass > cap {
                return Err(Error::DualUnbounded { mass, cap });
            }
        }
        if res <= cfg.grad_tol {
            converged = true;
            break;
        }
        if iter == cfg.max_iters {
            break;
        }
        iterations = iter + 1;

        let d: Vec<f64> =
            cur.lambda.iter().zip(&cur.grad).map(|(l, g)| (l + alpha * g).max(0.0) - l).collect();
        let slope: f64 = d.iter().zip(&cur.grad).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        let mut accepted = None;
        let roundoff = 8.0 * f64::EPSILON * identity_scale(cur.value);
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = cur.lambda.iter().zip(&d).map(|(l, di)| (l + t * di).max(0.0)).collect();
            let next = ev.eval(trial)?;
            if next.value >= cur.value + ARMIJO_C * t * slope {
                accepted = Some(next);
                break;
            }
            if next.value >= cur.value - roundoff {
                let next_res = projected_residual(&next.lambda, &next.grad);
                if next_res < res {
                    accepted = Some(next);
                    break;
                }
            }
            t *= 0.5;
        }
        let Some(next) = accepted else {
            // No ascent direction resolvable in floating point.
            break;
        };
        let s: Vec<f64> = next.lambda.iter().zip(&cur.lambda).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.grad.iter().zip(&cur.grad).map(|(a, b)| a - b).collect();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        // G is concave, so ⟨s, y⟩ ≤ 0; BB1 step for ascent.
        alpha = if sy < 0.0 { (ss / -sy).clamp(1e-10, 1e10) } else { (alpha * 2.0).min(1e10) };
        cur = next;
        res = projected_residual(&cur.lambda, &cur.grad);
    }

    finish(psi, f_derivative, cfg, cur, trace, iterations, converged, ev.max_identity_residual)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    psi: &PsiMatrix,
    f_derivative: &[f64],
    cfg: &DualConfig,
    cur: Iterate,
    trace: Vec<TraceRow>,
    iterations: usize,
    converged: bool,
    max_identity_residual: f64,
) -> Result<GibbsSolution> {
    let g = cur.grad;
    let se = constraint_standard_errors(psi, &cur.measure, &g);
    let feas_tol = cfg.feas_tol.unwrap_or_else(|| (3.0 * se.iter().copied().fold(0.0, f64::max)).max(1e-8));
    let max_violation = g.iter().copied().fold(0.0, f64::max);
    let max_slackness_residual =
        cur.lambda.iter().zip(&g).map(|(l, gj)| l.min(gj.abs())).fold(0.0, f64::max);
    let mass = mass_of(&cur.lambda);
    let ess = cur.measure.effective_sample_size();
    let mut warnings = Vec::new();
    let n = psi.rows() as f64;
    if ess < cfg.ess_warn_fraction * n {
        warnings.push(format!(
            "effective sample size {ess:.1} below {:.0}% of N; the exponential-moment margin may be violated",
            100.0 * cfg.ess_warn_fraction
        ));
    }
    let objective = cur.measure.relative_entropy()
        + if f_derivative.is_empty() { 0.0 } else { cur.measure.expectation(|i| f_derivative[i]) };
    let primal = identity_rhs(f_derivative, &cur.lambda, &cur.measure, &g);
    Ok(GibbsSolution {
        multiplier: Multiplier::new(cur.lambda)?,
        measure: cur.measure,
        dual_value: cur.value,
        primal_value: primal,
        objective,
        kkt: KktReport {
            max_violation,
            max_slackness_residual,
            feas_tol,
            slack_tol: cfg.slack_tol,
            feasible: max_violation <= feas_tol,
            slack_ok: max_slackness_residual <= cfg.slack_tol,
        },
        gradient: g,
        standard_errors: se,
        iterations,
        outer_iterations: 1,
        mass,
        converged,
        max_identity_residual,
        stationary_only: false,
        effective_sample_size: ess,
        warnings,
        trace,
    })
}

/// `C = η⁻¹ [log⟨ν, e^{-f}⟩ + H(μ̃|ν) + ⟨μ̃, f⟩]`, an upper bound on the
/// optimal multiplier mass given a strictly feasible witness `μ̃` with
/// `⟨μ̃, ψ_j⟩ ≤ -η` for every node.
pub fn mass_bound(psi: &PsiMatrix, witness: &WeightedMeasure, eta: f64, f_derivative: &[f64]) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::Precondition(format!("eta must be positive, got {eta}")));
    }
    let (g, _) = constraint_violation(psi, witness);
    if let Some((j, gj)) = g.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) {
        if *gj > -eta {
            return Err(Error::Precondition(format!(
                "witness is not strictly feasible: <μ̃, ψ> = {gj} > -η at node {j}"
            )));
        }
    }
    let (log_z, f_pair) = if f_derivative.is_empty() {
        (0.0, 0.0)
    } else {
        let tilt = WeightedMeasure::tilt(f_derivative)?;
        (tilt.log_normalizer(), witness.expectation(|i| f_derivative[i]))
    };
    Ok((log_z + witness.relative_entropy() + f_pair) / eta)
}

/// Mean-field energy `F(μ) = β Σ_{j ∈ nodes} Φ(μ_{t_j})`.
#[derive(Clone)]
pub struct InteractionEnergy {
    pub functional: Arc<dyn NonlinearConstraint>,
    pub nodes: Vec<usize>,
    pub beta: f64,
}

impl InteractionEnergy {
    fn value_and_derivative(&self, ens: &PathEnsemble, mu: &WeightedMeasure) -> (f64, Vec<f64>) {
        let n = ens.n_paths();
        let mut value = 0.0;
        let mut deriv = vec![0.0; n];
        for &j in &self.nodes {
            let states = node_states(ens, j);
            let m = Marginal::new(ens.dim(), &states, mu.weights());
            value += self.beta * self.functional.evaluate(&m);
            for (d, s) in deriv.iter_mut().zip(self.functional.derivative_at_samples(&m)) {
                *d += self.beta * s;
            }
        }
        (value, deriv)
    }
}

fn node_states(ens: &PathEnsemble, j: usize) -> Vec<f64> {
    (0..ens.n_paths()).flat_map(|i| ens.state(i, j).to_vec()).collect()
}

/// Constraint data for [`solve_mean_field`].
#[derive(Clone)]
pub enum ConstraintSet {
    Linear(PsiMatrix),
    Nonlinear(Arc<dyn NonlinearConstraint>),
}

/// Outer fixed-point loop for a mean-field energy and/or a nonlinear
/// constraint.
///
/// Each outer step freezes `δF/δμ` and the linearized constraint at the
/// current weights `w̄`, solves the inner dual problem, and damps
/// `w̄ ← (1-α) w̄ + α w_new`. It stops when re-tilting `w̄` with its own
/// frozen data moves it by at most `outer_tol` in total variation. For a
/// nonlinear constraint the slopes are scaled by a trust factor `ε̃`, which
/// starts at 1 and halves whenever the true violation regresses; the
/// reported multiplier is `ε̃ λ`.
pub fn solve_mean_field(
    ensemble: &PathEnsemble,
    energy: Option<&InteractionEnergy>,
    constraint: &ConstraintSet,
    cfg: &DualConfig,
) -> Result<GibbsSolution> {
    cfg.validate()?;
    let n = ensemble.n_paths();
    let nonconvex = energy.is_some_and(|e| !e.functional.is_convex() || e.beta < 0.0)
        || matches!(constraint, ConstraintSet::Nonlinear(c) if !c.is_convex());
    if nonconvex && !cfg.allow_nonconvex {
        return Err(Error::Precondition(
            "non-convex instance: set allow_nonconvex to compute a stationary point".into(),
        ));
    }
    for f in energy.iter().map(|e| &e.functional).chain(match constraint {
        ConstraintSet::Nonlinear(c) => Some(c),
        ConstraintSet::Linear(_) => None,
    }) {
        if let Some(cap) = f.max_particles() {
            if n > cap {
                return Err(Error::InvalidInput(format!("{} accepts at most {cap} particles, got {n}", f.name())));
            }
        }
    }
    if let ConstraintSet::Linear(p) = constraint {
        if p.rows() != n {
            return Err(Error::InvalidInput("constraint matrix and ensemble sizes differ".into()));
        }
        if energy.is_none() {
            return solve_projected_ascent(p, &[], cfg, None);
        }
    }

    let mut wbar = WeightedMeasure::uniform(n);
    let mut trust = 1.0;
    let mut lambda: Option<Multiplier> = None;
    let mut tv_history: Vec<f64> = Vec::new();
    let mut prev_violation = f64::INFINITY;
    let mut total_iters = 0;

    let frozen = |w: &WeightedMeasure, trust: f64| -> Result<(Vec<f64>, PsiMatrix, f64)> {
        let (fval, f) = match energy {
            Some(e) => e.value_and_derivative(ensemble, w),
            None => (0.0, Vec::new()),
        };
        let psi = match constraint {
            ConstraintSet::Linear(p) => p.clone(),
            ConstraintSet::Nonlinear(c) => linearize_nonlinear(c.as_ref(), ensemble, w)?.effective_psi(trust),
        };
        Ok((f, psi, fval))
    };
    let true_violation = |w: &WeightedMeasure, psi: &PsiMatrix| -> Result<f64> {
        Ok(match constraint {
            ConstraintSet::Linear(_) => constraint_violation(psi, w).1,
            ConstraintSet::Nonlinear(c) => crate::constraints::evaluate_nonlinear(c.as_ref(), ensemble, w)?
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max),
        })
    };

    for outer in 1..=cfg.outer_max {
        let (f, psi, _) = frozen(&wbar, trust)?;
        let inner = solve_projected_ascent(&psi, &f, cfg, lambda.as_ref())?;
        total_iters += inner.iterations;
        let next = wbar.mix(&inner.measure, cfg.outer_damping);
        let violation = true_violation(&next, &psi)?;
        if matches!(constraint, ConstraintSet::Nonlinear(_))
            && violation > prev_violation.max(0.0) + 1e-12
            && trust > 1e-6
        {
            trust *= 0.5;
        }
        prev_violation = violation;
        lambda = Some(inner.multiplier.clone());
        wbar = WeightedMeasure::from_weights(next.weights().to_vec())?;

        // Self-consistency: re-tilt w̄ with data frozen at w̄ itself.
        let (f2, psi2, fval) = frozen(&wbar, trust)?;
        let (_, retilt) = gibbs_free_energy(&psi2, &f2, lambda.as_ref().unwrap())?;
        let tv = wbar.total_variation(&retilt);
        tv_history.push(tv);
        if tv <= cfg.outer_tol {
            let mut sol = solve_projected_ascent(&psi2, &f2, cfg, lambda.as_ref())?;
            total_iters += sol.iterations;
            sol.iterations = total_iters;
            sol.outer_iterations = outer;
            sol.objective = sol.measure.relative_entropy() + fval;
            sol.stationary_only = nonconvex;
            if trust != 1.0 {
                sol.multiplier = Multiplier::new(sol.multiplier.atoms().iter().map(|l| l * trust).collect())?;
                sol.mass = sol.multiplier.mass();
            }
            if nonconvex {
                sol.warnings.push("non-convex instance: stationary point only".into());
            }
            return Ok(sol);
        }
        if tv_history.len() >= 11 {
            let tail = &tv_history[tv_history.len() - 11..];
            if tail.windows(2).all(|w| w[1] >= w[0]) {
                return Err(Error::FixedPointNotReached(format!(
                    "total-variation change non-decreasing over 10 outer iterations (last {tv:e})"
                )));
            }
        }
    }
    Err(Error::FixedPointNotReached(format!(
        "outer loop hit {} iterations (last change {:e})",
        cfg.outer_max,
        tv_history.last().copied().unwrap_or(f64::NAN)
    )))
}

/// Particle estimate of `F(μ)` for a frozen-derivative energy, exposed for
/// callers that report the mean-field objective.
pub fn interaction_value(energy: &InteractionEnergy, ensemble: &PathEnsemble, mu: &WeightedMeasure) -> f64 {
    energy.value_and_derivative(ensemble, mu).0
}

/// Largest `|⟨μ, δF/δμ⟩|`, a sanity check on centering conventions.
pub fn derivative_centering(f_derivative: &[f64], mu: &WeightedMeasure) -> f64 {
    par_sum(f_derivative.len(), |i| mu.weights()[i] * f_derivative[i]).abs()
}
