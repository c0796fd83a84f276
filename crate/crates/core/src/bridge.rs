//! Constrained Schrödinger bridge on a finite state space.
//!
//! The optimal path law has density
//! `exp[-ζ₀(x₀) - ζ_T(x_M) - Σ_j λ_j ψ_j(x_j)] / Z` against a Markov chain
//! reference. Endpoint potentials come from log-domain iterative
//! proportional fitting, multipliers from projected ascent on the reduced
//! dual `λ ↦ max_ζ D(ζ, λ)`, where
//! `D = -log Z - ⟨μ^ini, ζ₀⟩ - ⟨μ^fin, ζ_T⟩`. Marginals are exact (forward
//! and backward messages), so every tolerance here is deterministic.

pub mod brute_force;

use serde::Serialize;

use crate::constraints::EndpointEquality;
use crate::dual_solver::{DualConfig, KktReport};
use crate::error::{Error, Result};
use crate::measure::Multiplier;
use crate::numeric::{compensated_sum, log_sum_exp};

const ARMIJO_C: f64 = 1e-4;

/// Finite-state Markov chain with one transition matrix per grid interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkovReference {
    states: Vec<f64>,
    init: Vec<f64>,
    /// `kernels[j][a * S + b] = P(X_{j+1} = b | X_j = a)`.
    kernels: Vec<Vec<f64>>,
}

impl MarkovReference {
    pub fn new(states: Vec<f64>, init: Vec<f64>, kernels: Vec<Vec<f64>>) -> Result<Self> {
        let s = states.len();
        if s == 0 || init.len() != s {
            return Err(Error::InvalidInput("initial law and state space sizes differ".into()));
        }
        if kernels.is_empty() {
            return Err(Error::InvalidInput("need at least one transition kernel".into()));
        }
        if init.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (compensated_sum(init.iter().copied()) - 1.0).abs() > 1e-12
        {
            return Err(Error::InvalidInput("initial law must be a probability vector".into()));
        }
        for (j, k) in kernels.iter().enumerate() {
            if k.len() != s * s {
                return Err(Error::InvalidInput(format!("kernel {j} must be {s}×{s}")));
            }
            for a in 0..s {
                let row = &k[a * s..(a + 1) * s];
                if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(Error::InvalidInput(format!("kernel {j} row {a} has a negative entry")));
                }
                if (compensated_sum(row.iter().copied()) - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!("kernel {j} row {a} does not sum to one")));
                }
            }
        }
        Ok(Self { states, init, kernels })
    }

    /// Discretized Gaussian random walk on an equispaced grid of `s` points in
    /// `[x_min, x_max]`: `K(a, b) ∝ exp(-(x_b - x_a)² / (2 v))`.
    pub fn gaussian_rw(s: usize, x_min: f64, x_max: f64, step_var: f64, steps: usize, init: Vec<f64>) -> Result<Self> {
        if s < 2 || !(x_max > x_min) || !(step_var > 0.0) || steps == 0 {
            return Err(Error::InvalidInput("gaussian_rw needs S ≥ 2, x_max > x_min, variance > 0, M ≥ 1".into()));
        }
        let states: Vec<f64> = (0..s).map(|k| x_min + (x_max - x_min) * k as f64 / (s - 1) as f64).collect();
        let mut k = vec![0.0; s * s];
        for a in 0..s {
            let logs: Vec<f64> = (0..s).map(|b| -(states[b] - states[a]).powi(2) / (2.0 * step_var)).collect();
            let lse = log_sum_exp(&logs);
            for b in 0..s {
                k[a * s + b] = (logs[b] - lse).exp();
            }
        }
        let init = normalized(init)?;
        Self::new(states, init, vec![k; steps])
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn size(&self) -> usize {
        self.states.len()
    }

    pub fn steps(&self) -> usize {
        self.kernels.len()
    }

    pub fn init(&self) -> &[f64] {
        &self.init
    }

    pub fn kernel(&self, j: usize) -> &[f64] {
        &self.kernels[j]
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.init.iter().all(|p| *p > 0.0) && self.kernels.iter().all(|k| k.iter().all(|p| *p > 0.0))
    }

    /// `ψ(x)` at every node and state: an `(M+1) × S` row-major matrix.
    pub fn psi_values(&self, psi: impl Fn(f64) -> f64) -> Vec<f64> {
        let row: Vec<f64> = self.states.iter().map(|&x| psi(x)).collect();
        row.repeat(self.steps() + 1)
    }
}

/// Discretized Gaussian profile on `states`, normalized.
pub fn gaussian_profile(states: &[f64], mean: f64, var: f64) -> Result<Vec<f64>> {
    normalized(states.iter().map(|x| (-(x - mean).powi(2) / (2.0 * var)).exp()).collect())
}

fn normalized(v: Vec<f64>) -> Result<Vec<f64>> {
    let s = compensated_sum(v.iter().copied());
    if !(s > 0.0) || v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidInput("distribution must be nonnegative with positive mass".into()));
    }
    Ok(v.into_iter().map(|p| p / s).collect())
}

/// Exact time marginals `(M+1) × S` and `log Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBackward {
    pub marginals: Vec<f64>,
    pub log_z: f64,
}

impl ForwardBackward {
    pub fn marginal(&self, j: usize, s: usize) -> &[f64] {
        &self.marginals[j * s..(j + 1) * s]
    }
}

fn node_log_potential(
    s: usize,
    j: usize,
    m: usize,
    zeta0: &[f64],
    zeta_t: &[f64],
    lambda: &[f64],
    psi: &[f64],
) -> Vec<f64> {
    (0..s)
        .map(|x| {
            let mut u = if lambda[j] != 0.0 { -lambda[j] * psi[j * s + x] } else { 0.0 };
            if j == 0 {
                u -= zeta0[x];
            }
            if j == m {
                u -= zeta_t[x];
            }
            u
        })
        .collect()
}

/// Forward–backward pass for the path law
/// `∝ ν(x) exp[-ζ₀(x₀) - ζ_T(x_M) - Σ_j λ_j ψ_j(x_j)]`. Potentials may be
/// `+∞` to exclude states.
pub fn forward_backward(
    reference: &MarkovReference,
    zeta0: &[f64],
    zeta_t: &[f64],
    lambda: &Multiplier,
    psi_values: &[f64],
) -> Result<ForwardBackward> {
    let (s, m) = (reference.size(), reference.steps());
    if zeta0.len() != s || zeta_t.len() != s || lambda.len() != m + 1 || psi_values.len() != (m + 1) * s {
        return Err(Error::InvalidInput("bridge dimensions disagree".into()));
    }
    if zeta0.iter().chain(zeta_t).any(|z| z.is_nan() || *z == f64::NEG_INFINITY) {
        return Err(Error::InvalidInput("endpoint potentials must not be NaN or -inf".into()));
    }
    if let Some(k) = psi_values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteConstraint { path: k % s, node: k / s });
    }
    let lam = lambda.atoms();
    let logk: Vec<Vec<f64>> =
        reference.kernels.iter().map(|k| k.iter().map(|p| p.ln()).collect()).collect();
    let u: Vec<Vec<f64>> = (0..=m).map(|j| node_log_potential(s, j, m, zeta0, zeta_t, lam, psi_values)).collect();

    let mut alpha = vec![0.0; (m + 1) * s];
    for x in 0..s {
        alpha[x] = reference.init[x].ln() + u[0][x];
    }
    let mut buf = vec![0.0; s];
    for j in 0..m {
        for b in 0..s {
            for a in 0..s {
                buf[a] = alpha[j * s + a] + logk[j][a * s + b];
            }
            alpha[(j + 1) * s + b] = log_sum_exp(&buf) + u[j + 1][b];
        }
    }
    let log_z = log_sum_exp(&alpha[m * s..]);
    if log_z == f64::NEG_INFINITY {
        return Err(Error::IncompatiblePotentials);
    }
    let mut beta = vec![0.0; (m + 1) * s];
    for j in (0..m).rev() {
        for a in 0..s {
            for b in 0..s {
                buf[b] = logk[j][a * s + b] + u[j + 1][b] + beta[(j + 1) * s + b];
            }
            beta[j * s + a] = log_sum_exp(&buf);
        }
    }
    let mut marginals = vec![0.0; (m + 1) * s];
    for j in 0..=m {
        let row: Vec<f64> = (0..s).map(|x| alpha[j * s + x] + beta[j * s + x] - log_z).collect();
        // Renormalize against rounding drift.
        let lse = log_sum_exp(&row);
        for x in 0..s {
            marginals[j * s + x] = (row[x] - lse).exp();
        }
    }
    Ok(ForwardBackward { marginals, log_z })
}

fn log_ratio(current: f64, target: f64) -> Result<f64> {
    match (current > 0.0, target > 0.0) {
        (true, true) => Ok(current.ln() - target.ln()),
        (_, false) => Ok(f64::INFINITY),
        (false, true) => Err(Error::EquivalenceViolation(
            "target charges a state the reference cannot reach".into(),
        )),
    }
}

/// One IPF sweep: update `ζ₀` to match `μ^ini`, recompute, then update
/// `ζ_T` to match `μ^fin`.
pub fn sinkhorn_step(
    reference: &MarkovReference,
    targets: &EndpointEquality,
    zeta0: &[f64],
    zeta_t: &[f64],
    lambda: &Multiplier,
    psi_values: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = reference.size();
    let m = reference.steps();
    let fb = forward_backward(reference, zeta0, zeta_t, lambda, psi_values)?;
    let mut z0 = zeta0.to_vec();
    let marg = fb.marginal(0, s);
    for (x, z) in z0.iter_mut().enumerate() {
        if z.is_finite() {
            *z += log_ratio(marg[x], targets.initial()[x])?;
        } else if targets.initial()[x] > 0.0 {
            return Err(Error::EquivalenceViolation(format!("initial target charges excluded state {x}")));
        }
    }
    let fb = forward_backward(reference, &z0, zeta_t, lambda, psi_values)?;
    let mut zt = zeta_t.to_vec();
    let marg = fb.marginal(m, s);
    for (x, z) in zt.iter_mut().enumerate() {
        if z.is_finite() {
            *z += log_ratio(marg[x], targets.terminal()[x])?;
        } else if targets.terminal()[x] > 0.0 {
            return Err(Error::EquivalenceViolation(format!("terminal target charges excluded state {x}")));
        }
    }
    Ok((z0, zt))
}

/// Largest total-variation error of the two endpoint marginals.
pub fn endpoint_error(fb: &ForwardBackward, targets: &EndpointEquality, s: usize, m: usize) -> f64 {
    let tv = |a: &[f64], b: &[f64]| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    tv(fb.marginal(0, s), targets.initial()).max(tv(fb.marginal(m, s), targets.terminal()))
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    pub dual: DualConfig,
    pub sinkhorn_tol: f64,
    pub max_sweeps: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            dual: DualConfig { grad_tol: 1e-10, feas_tol: Some(1e-8), slack_tol: 1e-8, ..DualConfig::default() },
            sinkhorn_tol: 1e-10,
            max_sweeps: 100_000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BridgeSolution {
    pub zeta0: Vec<f64>,
    pub zeta_t: Vec<f64>,
    pub multiplier: Multiplier,
    /// `(M+1) × S` row-major.
    pub marginals: Vec<f64>,
    /// `H(μ̄|ν)`.
    pub value: f64,
    pub dual_value: f64,
    pub log_z: f64,
    pub gradient: Vec<f64>,
    pub kkt: KktReport,
    pub endpoint_error: f64,
    pub min_marginal: f64,
    pub iterations: usize,
    pub sweeps: usize,
    pub converged: bool,
    pub residual_trace: Vec<f64>,
    /// Reduced dual value at every accepted iterate.
    pub dual_trace: Vec<f64>,
}

struct Fitted {
    zeta0: Vec<f64>,
    zeta_t: Vec<f64>,
    fb: ForwardBackward,
    dual: f64,
    grad: Vec<f64>,
}

fn pairing(p: &[f64], z: &[f64]) -> f64 {
    compensated_sum(p.iter().zip(z).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * b))
}

/// Per-node constraint values `g_j = ⟨μ_j, ψ_j⟩`.
fn node_means(fb: &ForwardBackward, psi: &[f64], s: usize, m: usize) -> Vec<f64> {
    (0..=m).map(|j| pairing(fb.marginal(j, s), &psi[j * s..(j + 1) * s])).collect()
}

struct Fitter<'a> {
    reference: &'a MarkovReference,
    targets: &'a EndpointEquality,
    psi: &'a [f64],
    tol: f64,
    max_sweeps: usize,
    sweeps: usize,
}

impl Fitter<'_> {
    /// IPF to tolerance from a warm start, then the reduced dual value.
    fn fit(&mut self, lambda: &Multiplier, mut z0: Vec<f64>, mut zt: Vec<f64>) -> Result<Fitted> {
        let (s, m) = (self.reference.size(), self.reference.steps());
        let mut fb = forward_backward(self.reference, &z0, &zt, lambda, self.psi)?;
        let mut local = 0;
        while endpoint_error(&fb, self.targets, s, m) > self.tol {
            if local >= self.max_sweeps {
                return Err(Error::NotConverged {
                    iterations: local,
                    detail: format!("IPF endpoint error {:e}", endpoint_error(&fb, self.targets, s, m)),
                });
            }
            let (a, b) = sinkhorn_step(self.reference, self.targets, &z0, &zt, lambda, self.psi)?;
            z0 = a;
            zt = b;
            fb = forward_backward(self.reference, &z0, &zt, lambda, self.psi)?;
            local += 1;
        }
        self.sweeps += local;
        let dual = -fb.log_z - pairing(self.targets.initial(), &z0) - pairing(self.targets.terminal(), &zt);
        let grad = node_means(&fb, self.psi, s, m);
        Ok(Fitted { zeta0: z0, zeta_t: zt, fb, dual, grad })
    }
}

fn projected_residual(lambda: &[f64], grad: &[f64]) -> f64 {
    lambda.iter().zip(grad).map(|(l, g)| (l - (l + g).max(0.0)).abs()).fold(0.0, f64::max)
}

/// Interleave IPF blocks with projected multiplier ascent until both the
/// endpoint error and the KKT residual are within tolerance.
pub fn solve_constrained_bridge(
    reference: &MarkovReference,
    targets: &EndpointEquality,
    psi_values: &[f64],
    cfg: &BridgeConfig,
) -> Result<BridgeSolution> {
    cfg.dual.validate()?;
    let (s, m) = (reference.size(), reference.steps());
    if targets.initial().len() != s || targets.terminal().len() != s {
        return Err(Error::InvalidInput("targets must have one entry per state".into()));
    }
    if !reference.is_strictly_positive() {
        return Err(Error::Precondition("constrained bridge needs a strictly positive reference".into()));
    }
    let mut fitter = Fitter {
        reference,
        targets,
        psi: psi_values,
        tol: cfg.sinkhorn_tol,
        max_sweeps: cfg.max_sweeps,
        sweeps: 0,
    };
    let mut lambda = vec![0.0; m + 1];
    let mut cur = fitter.fit(&Multiplier::zeros(m + 1), vec![0.0; s], vec![0.0; s])?;
    let mut alpha = cfg.dual.step_size;
    let mut res = projected_residual(&lambda, &cur.grad);
    let mut trace = vec![res];
    let mut dual_trace = vec![cur.dual];
    let mut iterations = 0;
    let mut converged = res <= cfg.dual.grad_tol;

    while !converged && iterations < cfg.dual.max_iters {
        iterations += 1;
        let d: Vec<f64> = lambda.iter().zip(&cur.grad).map(|(l, g)| (l + alpha * g).max(0.0) - l).collect();
        let slope: f64 = d.iter().zip(&cur.grad).map(|(a, b)| a * b).sum();
        let roundoff = 8.0 * f64::EPSILON * cur.dual.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = lambda.iter().zip(&d).map(|(l, di)| (l + t * di).max(0.0)).collect();
            let next = fitter.fit(&Multiplier::new(trial.clone())?, cur.zeta0.clone(), cur.zeta_t.clone())?;
            if next.dual >= cur.dual + ARMIJO_C * t * slope
                || (next.dual >= cur.dual - roundoff && projected_residual(&trial, &next.grad) < res)
            {
                accepted = Some((trial, next));
                break;
            }
            t *= 0.5;
        }
        let Some((trial, next)) = accepted else { break };
        let sv: Vec<f64> = trial.iter().zip(&lambda).map(|(a, b)| a - b).collect();
        let ss: f64 = sv.iter().map(|v| v * v).sum();
        let sy: f64 = sv.iter().zip(next.grad.iter().zip(&cur.grad)).map(|(a, (g1, g0))| a * (g1 - g0)).sum();
        alpha = if sy < 0.0 { (ss / -sy).clamp(1e-10, 1e10) } else { (alpha * 2.0).min(1e10) };
        lambda = trial;
        cur = next;
        res = projected_residual(&lambda, &cur.grad);
        trace.push(res);
        dual_trace.push(cur.dual);
        if let Some(cap) = cfg.dual.mass_cap {
            let mass = compensated_sum(lambda.iter().copied());
            if mass > cap {
                return Err(Error::DualUnbounded { mass, cap });
            }
        }
        converged = res <= cfg.dual.grad_tol;
    }

    let fb = &cur.fb;
    let value = -pairing(fb.marginal(0, s), &cur.zeta0)
        - pairing(fb.marginal(m, s), &cur.zeta_t)
        - lambda.iter().enumerate().map(|(j, l)| l * cur.grad[j]).sum::<f64>()
        - fb.log_z;
    let max_violation = cur.grad.iter().copied().fold(0.0, f64::max);
    let slack = lambda.iter().zip(&cur.grad).map(|(l, g)| l.min(g.abs())).fold(0.0, f64::max);
    let feas_tol = cfg.dual.feas_tol.unwrap_or(1e-8);
    let err = endpoint_error(fb, targets, s, m);
    Ok(BridgeSolution {
        multiplier: Multiplier::new(lambda)?,
        marginals: fb.marginals.clone(),
        value,
        dual_value: cur.dual,
        log_z: fb.log_z,
        kkt: KktReport {
            max_violation,
            max_slackness_residual: slack,
            feas_tol,
            slack_tol: cfg.dual.slack_tol,
            feasible: max_violation <= feas_tol,
            slack_ok: slack <= cfg.dual.slack_tol,
        },
        gradient: cur.grad.clone(),
        endpoint_error: err,
        min_marginal: fb.marginals.iter().copied().fold(f64::INFINITY, f64::min),
        iterations,
        sweeps: fitter.sweeps,
        converged: converged && err <= cfg.sinkhorn_tol,
        residual_trace: trace,
        dual_trace,
        zeta0: cur.zeta0,
        zeta_t: cur.zeta_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(s: usize, m: usize) -> MarkovReference {
        MarkovReference::gaussian_rw(s, -2.0, 2.0, 0.5, m, vec![1.0; s]).unwrap()
    }

    #[test]
    fn kernel_rows_are_stochastic() {
        let r = chain(7, 3);
        for j in 0..3 {
            for a in 0..7 {
                let s: f64 = r.kernel(j)[a * 7..(a + 1) * 7].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(MarkovReference::new(vec![0.0, 1.0], vec![0.5, 0.5], vec![vec![0.5, 0.6, 0.5, 0.5]]).is_err());
    }

    #[test]
    fn free_pass_reproduces_reference_marginals() {
        let r = chain(5, 4);
        let psi = r.psi_values(|x| x);
        let fb = forward_backward(&r, &[0.0; 5], &[0.0; 5], &Multiplier::zeros(5), &psi).unwrap();
        assert!(fb.log_z.abs() < 1e-14);
        let mut p = r.init().to_vec();
        for j in 0..4 {
            for (a, b) in p.iter().zip(fb.marginal(j, 5)) {
                assert!((a - b).abs() < 1e-14);
            }
            let k = r.kernel(j);
            p = (0..5).map(|b| (0..5).map(|a| p[a] * k[a * 5 + b]).sum()).collect();
        }
    }

    #[test]
    fn pinned_terminal_state() {
        let r = chain(4, 3);
        let psi = r.psi_values(|_| 0.0);
        let zt = [f64::INFINITY, f64::INFINITY, 0.0, f64::INFINITY];
        let fb = forward_backward(&r, &[0.0; 4], &zt, &Multiplier::zeros(4), &psi).unwrap();
        assert_eq!(fb.marginal(3, 4), &[0.0, 0.0, 1.0, 0.0]);
        let all = [f64::INFINITY; 4];
        assert!(matches!(
            forward_backward(&r, &[0.0; 4], &all, &Multiplier::zeros(4), &psi),
            Err(Error::IncompatiblePotentials)
        ));
    }

    #[test]
    fn sinkhorn_fixed_point_and_two_state_sweep() {
        let r = MarkovReference::new(vec![0.0, 1.0], vec![0.5, 0.5], vec![vec![0.7, 0.3, 0.2, 0.8]]).unwrap();
        let psi = r.psi_values(|_| 0.0);
        let lam = Multiplier::zeros(2);
        // Reference marginals are already the targets: nothing moves.
        let t = EndpointEquality::new(vec![0.5, 0.5], vec![0.45, 0.55]).unwrap();
        let (a, b) = sinkhorn_step(&r, &t, &[0.0; 2], &[0.0; 2], &lam, &psi).unwrap();
        assert!(a.iter().chain(&b).all(|z| z.abs() < 1e-15));

        // Closed form: ζ₀ = log(ν₀/μ^ini); then the terminal law is
        // q_b = Σ_a μ^ini_a K_ab and ζ_T = log(q/μ^fin).
        let t = EndpointEquality::new(vec![0.2, 0.8], vec![0.6, 0.4]).unwrap();
        let (a, b) = sinkhorn_step(&r, &t, &[0.0; 2], &[0.0; 2], &lam, &psi).unwrap();
        assert!((a[0] - (0.5f64 / 0.2).ln()).abs() < 1e-14);
        assert!((a[1] - (0.5f64 / 0.8).ln()).abs() < 1e-14);
        let q = [0.2 * 0.7 + 0.8 * 0.2, 0.2 * 0.3 + 0.8 * 0.8];
        assert!((b[0] - (q[0] / 0.6f64).ln()).abs() < 1e-14);
        assert!((b[1] - (q[1] / 0.4f64).ln()).abs() < 1e-14);
        let fb = forward_backward(&r, &a, &b, &lam, &psi).unwrap();
        assert!((fb.marginal(1, 2)[0] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn ipf_error_decreases() {
        let r = chain(9, 5);
        let psi = r.psi_values(|x| x);
        let lam = Multiplier::new(vec![0.0, 0.3, 0.0, 0.5, 0.0, 0.0]).unwrap();
        let t = EndpointEquality::new(
            gaussian_profile(r.states(), 1.0, 0.3).unwrap(),
            gaussian_profile(r.states(), -0.5, 0.6).unwrap(),
        )
        .unwrap();
        let (mut z0, mut zt) = (vec![0.0; 9], vec![0.0; 9]);
        let mut prev = f64::INFINITY;
        for _ in 0..30 {
            let (a, b) = sinkhorn_step(&r, &t, &z0, &zt, &lam, &psi).unwrap();
            z0 = a;
            zt = b;
            let fb = forward_backward(&r, &z0, &zt, &lam, &psi).unwrap();
            let e = endpoint_error(&fb, &t, 9, 5);
            assert!(e <= prev + 1e-15);
            prev = e;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn unreachable_target_is_refused() {
        let r = MarkovReference::new(vec![0.0, 1.0], vec![1.0, 0.0], vec![vec![1.0, 0.0, 0.0, 1.0]]).unwrap();
        let t = EndpointEquality::new(vec![0.5, 0.5], vec![0.5, 0.5]).unwrap();
        let psi = r.psi_values(|_| 0.0);
        let err = sinkhorn_step(&r, &t, &[0.0; 2], &[0.0; 2], &Multiplier::zeros(2), &psi).unwrap_err();
        assert!(matches!(err, Error::EquivalenceViolation(_)));
    }

    #[test]
    fn slack_constraint_gives_classical_bridge() {
        let r = chain(7, 4);
        let t = EndpointEquality::new(
            gaussian_profile(r.states(), 0.5, 0.4).unwrap(),
            gaussian_profile(r.states(), 0.0, 0.4).unwrap(),
        )
        .unwrap();
        let psi = r.psi_values(|x| x - 10.0);
        let sol = solve_constrained_bridge(&r, &t, &psi, &BridgeConfig::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.multiplier.mass(), 0.0);
        assert!((sol.value - sol.dual_value).abs() < 1e-9);
    }

    #[test]
    fn mean_constraint_against_drifting_endpoints() {
        let r = MarkovReference::gaussian_rw(25, -3.0, 3.0, 0.3, 8, vec![1.0; 25]).unwrap();
        let target = gaussian_profile(r.states(), 1.0, 0.25).unwrap();
        let t = EndpointEquality::new(target.clone(), target).unwrap();
        // Interior-only constraint: endpoints are pinned by the targets.
        let mut psi = r.psi_values(|x| x);
        psi[..25].fill(0.0);
        psi[8 * 25..].fill(0.0);
        let sol = solve_constrained_bridge(&r, &t, &psi, &BridgeConfig::default()).unwrap();
        assert!(sol.converged, "{:?}", sol.residual_trace.last());
        assert!(sol.multiplier.mass() > 0.0);
        assert!(sol.kkt.max_violation <= 1e-8);
        assert!(sol.kkt.max_slackness_residual <= 1e-8);
        assert!(sol.endpoint_error <= 1e-8);
        assert!(sol.min_marginal > 0.0);
        assert!((sol.value - sol.dual_value).abs() < 1e-8);
    }
}
