//! Constraint families on time marginals and their linear functional
//! derivatives.
//!
//! A linear constraint is `⟨μ_t, ψ⟩ ≤ 0` at every grid time. A nonlinear one
//! is `Ψ(μ_t) ≤ 0` for a functional `Ψ` of the time marginal with a centered
//! derivative `δΨ/δμ(μ, x)`, i.e. `⟨μ, δΨ/δμ(μ)⟩ = 0`.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{PathEnsemble, WeightedMeasure};
use crate::numeric::{self, par_sum};

/// Default particle cap for dense `O(N²)` interaction constraints.
pub const DEFAULT_INTERACTION_CAP: usize = 4096;

pub type StateFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `Ψ_t(μ) = ⟨μ_t, ψ⟩`.
#[derive(Clone)]
pub struct LinearConstraint {
    psi: StateFn,
    /// `C` with `|ψ(x)| ≤ C(1 + |x|)`; `None` skips the growth check.
    growth_bound: Option<f64>,
    label: String,
}

impl fmt::Debug for LinearConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearConstraint")
            .field("label", &self.label)
            .field("growth_bound", &self.growth_bound)
            .finish()
    }
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

impl LinearConstraint {
    pub fn new(psi: StateFn, growth_bound: Option<f64>, label: impl Into<String>) -> Self {
        Self { psi, growth_bound, label: label.into() }
    }

    /// `ψ(x) = x₀ - c`.
    pub fn linear_mean(c: f64) -> Self {
        Self::new(Arc::new(move |x| x[0] - c), Some(1.0 + c.abs()), format!("x - {c}"))
    }

    /// `ψ(x) = Σ_k a_k x₀^k`. The growth check applies only up to degree one.
    pub fn polynomial(coeffs: &[f64]) -> Self {
        let c = coeffs.to_vec();
        let growth = if c.len() <= 2 { Some(c.iter().map(|v| v.abs()).sum::<f64>().max(1e-300)) } else { None };
        Self::new(Arc::new(move |x| horner(&c, x[0])), growth, format!("poly{coeffs:?}"))
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.psi)(x)
    }

    /// `ψ + δ`, e.g. `δ = -ε` for the ε-relaxed constraint.
    pub fn shifted(&self, delta: f64) -> Self {
        let psi = self.psi.clone();
        Self {
            psi: Arc::new(move |x| psi(x) + delta),
            growth_bound: self.growth_bound.map(|c| c + delta.abs()),
            label: format!("{} + {delta}", self.label),
        }
    }
}

/// Dense `N × (M+1)` matrix `ψ(x^i_{t_j})`, row-major by particle.
#[derive(Debug, Clone, PartialEq)]
pub struct PsiMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl PsiMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "psi matrix needs {rows}×{cols} entries, got {}",
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteConstraint { path: k / cols, node: k % cols });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Column `j` over all particles.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// Every entry plus `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v + delta).collect() }
    }

    /// `V_i = Σ_j λ_j ψ_ij`.
    pub fn contract(&self, lambda: &[f64]) -> Vec<f64> {
        assert_eq!(lambda.len(), self.cols);
        (0..self.rows)
            .into_par_iter()
            .map(|i| {
                let row = self.row(i);
                numeric::compensated_sum(
                    row.iter().zip(lambda).filter(|(_, l)| **l != 0.0).map(|(p, l)| p * l),
                )
            })
            .collect()
    }
}

/// Entry `(i, j) = ψ(x^i_{t_j})`.
pub fn evaluate_psi_matrix(ensemble: &PathEnsemble, c: &LinearConstraint) -> Result<PsiMatrix> {
    let (n, m1) = (ensemble.n_paths(), ensemble.grid().len());
    let mut data = vec![0.0; n * m1];
    data.par_chunks_mut(m1).enumerate().try_for_each(|(i, row)| -> Result<()> {
        for (j, v) in row.iter_mut().enumerate() {
            let x = ensemble.state(i, j);
            let p = c.eval(x);
            if !p.is_finite() {
                return Err(Error::NonFiniteConstraint { path: i, node: j });
            }
            if let Some(bound) = c.growth_bound {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if p.abs() > bound * (1.0 + norm) * (1.0 + 1e-12) {
                    return Err(Error::InvalidInput(format!(
                        "constraint {} exceeds its growth bound at path {i}, node {j}",
                        c.label
                    )));
                }
            }
            *v = p;
        }
        Ok(())
    })?;
    PsiMatrix::new(n, m1, data)
}

/// `g_j = ⟨μ, ψ_{t_j}⟩` and `sup_j g_j`.
pub fn constraint_violation(psi: &PsiMatrix, measure: &WeightedMeasure) -> (Vec<f64>, f64) {
    assert_eq!(psi.rows(), measure.len());
    let w = measure.weights();
    let g = numeric::par_sum_vec(psi.rows(), psi.cols(), |i, acc| {
        let wi = w[i];
        if wi > 0.0 {
            for (a, p) in acc.iter_mut().zip(psi.row(i)) {
                a.add(wi * p);
            }
        }
    });
    let sup = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (g, sup)
}

/// Self-normalized standard errors of each `g_j`.
pub fn constraint_standard_errors(psi: &PsiMatrix, measure: &WeightedMeasure, g: &[f64]) -> Vec<f64> {
    let w = measure.weights();
    numeric::par_sum_vec(psi.rows(), psi.cols(), |i, acc| {
        let wi = w[i];
        if wi > 0.0 {
            for ((a, p), gj) in acc.iter_mut().zip(psi.row(i)).zip(g) {
                a.add(wi * wi * (p - gj) * (p - gj));
            }
        }
    })
    .into_iter()
    .map(f64::sqrt)
    .collect()
}

/// A weighted sample `(x_i, w_i)` of one time marginal.
#[derive(Clone, Copy, Debug)]
pub struct Marginal<'a> {
    pub dim: usize,
    pub states: &'a [f64],
    pub weights: &'a [f64],
}

impl<'a> Marginal<'a> {
    pub fn new(dim: usize, states: &'a [f64], weights: &'a [f64]) -> Self {
        assert_eq!(states.len(), dim * weights.len());
        Self { dim, states, weights }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &'a [f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }
}

/// A functional `Ψ` of a time marginal with its linear functional derivative.
pub trait NonlinearConstraint: Send + Sync {
    fn evaluate(&self, mu: &Marginal<'_>) -> f64;

    /// `δΨ/δμ(μ, x)`, centered: `⟨μ, δΨ/δμ(μ)⟩ = 0`.
    fn derivative(&self, mu: &Marginal<'_>, x: &[f64]) -> f64;

    /// The derivative at every sample point of `mu`.
    fn derivative_at_samples(&self, mu: &Marginal<'_>) -> Vec<f64> {
        (0..mu.len()).into_par_iter().map(|i| self.derivative(mu, mu.point(i))).collect()
    }

    /// Whether `μ ↦ Ψ(μ)` is convex.
    fn is_convex(&self) -> bool;

    /// Largest particle count this constraint accepts.
    fn max_particles(&self) -> Option<usize> {
        None
    }

    fn name(&self) -> String;
}

/// A linear constraint seen through the nonlinear interface:
/// `δΨ/δμ(μ, x) = ψ(x) - ⟨μ, ψ⟩`.
#[derive(Clone, Debug)]
pub struct LinearAsNonlinear(pub LinearConstraint);

fn weighted_mean(mu: &Marginal<'_>, f: impl Fn(&[f64]) -> f64 + Sync) -> f64 {
    par_sum(mu.len(), |i| {
        let w = mu.weights[i];
        if w > 0.0 {
            w * f(mu.point(i))
        } else {
            0.0
        }
    })
}

impl NonlinearConstraint for LinearAsNonlinear {
    fn evaluate(&self, mu: &Marginal<'_>) -> f64 {
        weighted_mean(mu, |x| self.0.eval(x))
    }

    fn derivative(&self, mu: &Marginal<'_>, x: &[f64]) -> f64 {
        self.0.eval(x) - self.evaluate(mu)
    }

    fn derivative_at_samples(&self, mu: &Marginal<'_>) -> Vec<f64> {
        let mean = self.evaluate(mu);
        (0..mu.len()).map(|i| self.0.eval(mu.point(i)) - mean).collect()
    }

    fn is_convex(&self) -> bool {
        true
    }

    fn name(&self) -> String {
        format!("linear({})", self.0.label())
    }
}

/// `Ψ(μ) = ⟨μ, W ⋆ μ⟩ = Σ_{i,k} w_i w_k W(x_i - x_k)`.
#[derive(Clone)]
pub struct QuadraticInteraction {
    kernel: StateFn,
    convex: bool,
    cap: usize,
    label: String,
}

impl fmt::Debug for QuadraticInteraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuadraticInteraction")
            .field("label", &self.label)
            .field("convex", &self.convex)
            .field("cap", &self.cap)
            .finish()
    }
}

impl QuadraticInteraction {
    pub fn new(kernel: StateFn, convex: bool, label: impl Into<String>) -> Self {
        Self { kernel, convex, cap: DEFAULT_INTERACTION_CAP, label: label.into() }
    }

    /// `W(x) = ½|x|² - M`, so `Ψ(μ) = Var(μ) - M`. Concave in `μ`.
    pub fn variance_cap(m: f64) -> Self {
        Self::new(
            Arc::new(move |x| 0.5 * x.iter().map(|v| v * v).sum::<f64>() - m),
            false,
            format!("variance <= {m}"),
        )
    }

    /// Polynomial `W` in one dimension. Convexity is the caller's claim.
    pub fn polynomial(coeffs: &[f64], convex: bool) -> Self {
        let c = coeffs.to_vec();
        Self::new(Arc::new(move |x| horner(&c, x[0])), convex, format!("W = poly{coeffs:?}"))
    }

    /// `W(x) = a exp(-|x|²/(2s²)) - c`, a positive-definite kernel for
    /// `a ≥ 0`, hence convex in `μ`.
    pub fn gaussian_kernel(amplitude: f64, width: f64, offset: f64) -> Self {
        Self::new(
            Arc::new(move |x| {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                amplitude * (-r2 / (2.0 * width * width)).exp() - offset
            }),
            amplitude >= 0.0,
            format!("W = {amplitude} exp(-|x|²/2·{width}²) - {offset}"),
        )
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    fn kernel_between(&self, x: &[f64], y: &[f64], buf: &mut [f64]) -> f64 {
        for ((b, a), c) in buf.iter_mut().zip(x).zip(y) {
            *b = a - c;
        }
        (self.kernel)(buf)
    }

    /// `Σ_k w_k [W(x - x_k) + W(x_k - x)]`.
    fn symmetric_convolution(&self, mu: &Marginal<'_>, x: &[f64]) -> f64 {
        let mut buf = vec![0.0; mu.dim];
        let mut acc = numeric::CompensatedSum::default();
        for k in 0..mu.len() {
            let w = mu.weights[k];
            if w > 0.0 {
                let xk = mu.point(k);
                let a = self.kernel_between(x, xk, &mut buf);
                let b = self.kernel_between(xk, x, &mut buf);
                acc.add(w * (a + b));
            }
        }
        acc.total()
    }
}

impl NonlinearConstraint for QuadraticInteraction {
    fn evaluate(&self, mu: &Marginal<'_>) -> f64 {
        par_sum(mu.len(), |i| {
            let wi = mu.weights[i];
            if wi == 0.0 {
                return 0.0;
            }
            let xi = mu.point(i);
            let mut buf = vec![0.0; mu.dim];
            let mut acc = numeric::CompensatedSum::default();
            for k in 0..mu.len() {
                let wk = mu.weights[k];
                if wk > 0.0 {
                    acc.add(wk * self.kernel_between(xi, mu.point(k), &mut buf));
                }
            }
            wi * acc.total()
        })
    }

    fn derivative(&self, mu: &Marginal<'_>, x: &[f64]) -> f64 {
        self.symmetric_convolution(mu, x) - 2.0 * self.evaluate(mu)
    }

    fn derivative_at_samples(&self, mu: &Marginal<'_>) -> Vec<f64> {
        quadratic_interaction(self, mu).1
    }

    fn is_convex(&self) -> bool {
        self.convex
    }

    fn max_particles(&self) -> Option<usize> {
        Some(self.cap)
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// Value `Ψ(μ)` and the centered derivative at every sample point.
pub fn quadratic_interaction(q: &QuadraticInteraction, mu: &Marginal<'_>) -> (f64, Vec<f64>) {
    let value = q.evaluate(mu);
    let deriv = (0..mu.len())
        .into_par_iter()
        .map(|i| q.symmetric_convolution(mu, mu.point(i)) - 2.0 * value)
        .collect();
    (value, deriv)
}

/// First-order model of a nonlinear constraint around `μ̄`:
/// `Ψ(μ_{t_j}) ≈ a_j + Σ_i (w_i - w̄_i) slope_ij`.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub offsets: Vec<f64>,
    pub slopes: PsiMatrix,
}

impl Linearization {
    /// Effective linear constraint matrix `a_j + scale · slope_ij`. Because the
    /// slopes are centered under `μ̄`, `⟨μ, ·⟩` of this matrix is the
    /// linearized constraint with trust-region factor `scale`.
    pub fn effective_psi(&self, scale: f64) -> PsiMatrix {
        let cols = self.slopes.cols();
        let data = self
            .slopes
            .data()
            .iter()
            .enumerate()
            .map(|(k, s)| self.offsets[k % cols] + scale * s)
            .collect();
        PsiMatrix { rows: self.slopes.rows(), cols, data }
    }
}

fn check_cap(c: &dyn NonlinearConstraint, n: usize) -> Result<()> {
    match c.max_particles() {
        Some(cap) if n > cap => Err(Error::InvalidInput(format!(
            "{} is evaluated densely and accepts at most {cap} particles, got {n}",
            c.name()
        ))),
        _ => Ok(()),
    }
}

/// `Ψ(μ_{t_j})` at every node.
pub fn evaluate_nonlinear(
    c: &dyn NonlinearConstraint,
    ensemble: &PathEnsemble,
    measure: &WeightedMeasure,
) -> Result<Vec<f64>> {
    check_cap(c, ensemble.n_paths())?;
    let d = ensemble.dim();
    Ok((0..ensemble.grid().len())
        .map(|j| {
            let states = node_states(ensemble, j);
            c.evaluate(&Marginal::new(d, &states, measure.weights()))
        })
        .collect())
}

fn node_states(ensemble: &PathEnsemble, j: usize) -> Vec<f64> {
    let d = ensemble.dim();
    let mut out = Vec::with_capacity(ensemble.n_paths() * d);
    for i in 0..ensemble.n_paths() {
        out.extend_from_slice(ensemble.state(i, j));
    }
    out
}

/// Offsets `a_j = Ψ(μ̄_{t_j})` and slopes `δΨ/δμ(μ̄_{t_j}, x^i_{t_j})`.
pub fn linearize_nonlinear(
    c: &dyn NonlinearConstraint,
    ensemble: &PathEnsemble,
    current: &WeightedMeasure,
) -> Result<Linearization> {
    let (n, m1, d) = (ensemble.n_paths(), ensemble.grid().len(), ensemble.dim());
    if current.len() != n {
        return Err(Error::InvalidInput("measure and ensemble sizes differ".into()));
    }
    check_cap(c, n)?;
    let mut offsets = Vec::with_capacity(m1);
    let mut data = vec![0.0; n * m1];
    for j in 0..m1 {
        let states = node_states(ensemble, j);
        let mu = Marginal::new(d, &states, current.weights());
        offsets.push(c.evaluate(&mu));
        for (i, s) in c.derivative_at_samples(&mu).into_iter().enumerate() {
            data[i * m1 + j] = s;
        }
    }
    if let Some(j) = offsets.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteConstraint { path: 0, node: j });
    }
    Ok(Linearization { offsets, slopes: PsiMatrix::new(n, m1, data)? })
}

/// Prescribed endpoint laws `μ̄₀ = μ^ini`, `μ̄_T = μ^fin` on a finite state
/// space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointEquality {
    initial: Vec<f64>,
    terminal: Vec<f64>,
}

impl EndpointEquality {
    /// Normalizes both targets; rejects negative or non-finite entries.
    pub fn new(initial: Vec<f64>, terminal: Vec<f64>) -> Result<Self> {
        Ok(Self { initial: normalize(initial, "initial")?, terminal: normalize(terminal, "terminal")? })
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn terminal(&self) -> &[f64] {
        &self.terminal
    }
}

fn normalize(v: Vec<f64>, which: &str) -> Result<Vec<f64>> {
    if v.is_empty() || v.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidInput(format!("{which} target must be finite and nonnegative")));
    }
    let s = numeric::compensated_sum(v.iter().copied());
    if s <= 0.0 {
        return Err(Error::InvalidInput(format!("{which} target has zero mass")));
    }
    Ok(v.into_iter().map(|p| p / s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::TimeGrid;
    use proptest::prelude::*;

    fn ensemble_from(paths: &[Vec<f64>]) -> PathEnsemble {
        let m = paths[0].len() - 1;
        let grid = TimeGrid::uniform(1.0, m).unwrap();
        PathEnsemble::new(grid, paths.len(), 1, paths.concat()).unwrap()
    }

    #[test]
    fn psi_matrix_on_constant_and_antisymmetric_paths() {
        let ens = ensemble_from(&[vec![2.0; 4], vec![2.0; 4]]);
        let psi = evaluate_psi_matrix(&ens, &LinearConstraint::linear_mean(0.0)).unwrap();
        assert!(psi.data().iter().all(|v| *v == 2.0));

        let ens = ensemble_from(&[vec![0.0, 0.5, -1.0, 2.0], vec![0.0, -0.5, 1.0, -2.0]]);
        let psi = evaluate_psi_matrix(&ens, &LinearConstraint::linear_mean(0.0)).unwrap();
        for j in 0..4 {
            assert_eq!(psi.get(0, j), -psi.get(1, j));
        }
        let (g, _) = constraint_violation(&psi, &WeightedMeasure::uniform(2));
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn psi_matrix_reports_non_finite_entry() {
        let ens = ensemble_from(&[vec![1.0, 1.0, 1.0], vec![1.0, -1.0, 1.0]]);
        let c = LinearConstraint::new(Arc::new(|x| x[0].ln()), None, "log");
        let err = evaluate_psi_matrix(&ens, &c).unwrap_err();
        assert!(matches!(err, Error::NonFiniteConstraint { path: 1, node: 1 }));
    }

    #[test]
    fn growth_bound_is_checked() {
        let ens = ensemble_from(&[vec![0.0, 3.0, 1.0]]);
        let c = LinearConstraint::new(Arc::new(|x| x[0] * x[0]), Some(1.0), "square");
        assert!(evaluate_psi_matrix(&ens, &c).is_err());
    }

    #[test]
    fn violation_on_point_mass() {
        let ens = ensemble_from(&[vec![0.0, 1.0, 2.0], vec![5.0, 5.0, 5.0]]);
        let psi = evaluate_psi_matrix(&ens, &LinearConstraint::linear_mean(0.0)).unwrap();
        let mu = WeightedMeasure::from_weights(vec![1.0, 0.0]).unwrap();
        let (g, sup) = constraint_violation(&psi, &mu);
        assert_eq!(g, vec![0.0, 1.0, 2.0]);
        assert_eq!(sup, 2.0);
    }

    #[test]
    fn quadratic_examples() {
        let c = QuadraticInteraction::polynomial(&[3.0], true);
        let xs = [0.3, -1.2, 2.0];
        let w = [0.2, 0.5, 0.3];
        let (v, d) = quadratic_interaction(&c, &Marginal::new(1, &xs, &w));
        assert!((v - 3.0).abs() < 1e-14);
        assert!(d.iter().all(|x| x.abs() < 1e-14));
        // Two atoms at ±1: ½·avg{0, 2, 2, 0} - M.
        let pair = |m: f64| {
            let c = QuadraticInteraction::variance_cap(m);
            c.evaluate(&Marginal::new(1, &[-1.0, 1.0], &[0.5, 0.5]))
        };
        assert!((pair(0.3) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn constant_kernel_derivative() {
        // Σ_k w_k [c + c] - 2c = 0: the centered derivative of a constant
        // functional vanishes.
        let c = QuadraticInteraction::polynomial(&[2.5], true);
        let mu = Marginal::new(1, &[1.0, 4.0], &[0.5, 0.5]);
        assert!(c.derivative(&mu, &[7.0]).abs() < 1e-15);
    }

    #[test]
    fn variance_cap_on_normal_samples() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::rng::stream_rng(3, 0);
        let xs: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w = vec![1.0 / 2000.0; 2000];
        let v = QuadraticInteraction::variance_cap(0.4).evaluate(&Marginal::new(1, &xs, &w));
        assert!((v - 0.6).abs() < 0.1);
    }

    #[test]
    fn interaction_cap_enforced() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let ens = PathEnsemble::new(grid, 10, 1, vec![0.0; 30]).unwrap();
        let c = QuadraticInteraction::variance_cap(1.0).with_cap(5);
        assert!(linearize_nonlinear(&c, &ens, &WeightedMeasure::uniform(10)).is_err());
    }

    #[test]
    fn linear_wrapper_linearizes_exactly() {
        let ens = ensemble_from(&[vec![0.0, 1.0, 3.0], vec![1.0, -2.0, 0.5], vec![2.0, 2.0, 2.0]]);
        let lin = LinearConstraint::linear_mean(0.5);
        let mu = WeightedMeasure::from_weights(vec![0.2, 0.3, 0.5]).unwrap();
        let l = linearize_nonlinear(&LinearAsNonlinear(lin.clone()), &ens, &mu).unwrap();
        let psi = evaluate_psi_matrix(&ens, &lin).unwrap();
        let eff = l.effective_psi(1.0);
        for (a, b) in eff.data().iter().zip(psi.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn endpoint_targets_are_normalized() {
        let e = EndpointEquality::new(vec![1.0, 3.0], vec![2.0, 2.0]).unwrap();
        assert_eq!(e.initial(), &[0.25, 0.75]);
        assert!(EndpointEquality::new(vec![-1.0, 2.0], vec![1.0]).is_err());
        assert!(EndpointEquality::new(vec![0.0, 0.0], vec![1.0]).is_err());
    }

    fn shipped() -> Vec<Box<dyn NonlinearConstraint>> {
        vec![
            Box::new(LinearAsNonlinear(LinearConstraint::polynomial(&[0.1, 1.0, 0.5]))),
            Box::new(QuadraticInteraction::variance_cap(0.7)),
            Box::new(QuadraticInteraction::polynomial(&[0.0, 0.3, 1.0, 0.2], false)),
            Box::new(QuadraticInteraction::gaussian_kernel(1.5, 0.8, 0.2)),
        ]
    }

    fn normalized(w: &[f64]) -> Vec<f64> {
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn derivative_is_centered(
            xs in prop::collection::vec(-3.0f64..3.0, 12),
            w in prop::collection::vec(0.01f64..1.0, 12),
        ) {
            let w = normalized(&w);
            let mu = Marginal::new(1, &xs, &w);
            for c in shipped() {
                let d = c.derivative_at_samples(&mu);
                let pairing: f64 = d.iter().zip(&w).map(|(a, b)| a * b).sum();
                prop_assert!(pairing.abs() < 1e-10, "{}: {}", c.name(), pairing);
            }
        }

        #[test]
        fn directional_derivative_matches_pairing(
            xs in prop::collection::vec(-2.0f64..2.0, 10),
            w in prop::collection::vec(0.05f64..1.0, 10),
            w2 in prop::collection::vec(0.05f64..1.0, 10),
        ) {
            let (w, w2) = (normalized(&w), normalized(&w2));
            let mu = Marginal::new(1, &xs, &w);
            for c in shipped() {
                let d = c.derivative_at_samples(&mu);
                let pairing: f64 = d.iter().zip(w2.iter().zip(&w)).map(|(g, (a, b))| g * (a - b)).sum();
                let base = c.evaluate(&mu);
                // For quadratic functionals the remainder is exactly ε·Q with
                // Q = Ψ(μ') - Ψ(μ) - pairing.
                let curvature = (c.evaluate(&Marginal::new(1, &xs, &w2)) - base - pairing).abs();
                for eps in [1e-3, 1e-4] {
                    let we: Vec<f64> = w.iter().zip(&w2).map(|(a, b)| (1.0 - eps) * a + eps * b).collect();
                    let q = (c.evaluate(&Marginal::new(1, &xs, &we)) - base) / eps;
                    prop_assert!((q - pairing).abs() <= 2.0 * eps * curvature.max(1.0),
                        "{} eps={}: {} vs {}", c.name(), eps, q, pairing);
                }
            }
        }

        #[test]
        fn convex_flag_is_honest(
            xs in prop::collection::vec(-3.0f64..3.0, 10),
            w in prop::collection::vec(0.01f64..1.0, 10),
            w2 in prop::collection::vec(0.01f64..1.0, 10),
        ) {
            let (w, w2) = (normalized(&w), normalized(&w2));
            let mid: Vec<f64> = w.iter().zip(&w2).map(|(a, b)| 0.5 * (a + b)).collect();
            for c in shipped().into_iter().filter(|c| c.is_convex()) {
                let a = c.evaluate(&Marginal::new(1, &xs, &w));
                let b = c.evaluate(&Marginal::new(1, &xs, &w2));
                let m = c.evaluate(&Marginal::new(1, &xs, &mid));
                prop_assert!(m <= 0.5 * (a + b) + 1e-10, "{}", c.name());
            }
        }
    }
}
