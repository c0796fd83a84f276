//! End-to-end harnesses: conditioning by rejection, the Csiszár bound,
//! ε-stability sweeps and weak stability under perturbations.

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::constraints::{LinearConstraint, PsiMatrix};
use crate::dual_solver::{solve_projected_ascent, DualConfig, GibbsSolution};
use crate::error::{Error, Result};
use crate::measure::{wasserstein1_1d, Empirical1d, PathEnsemble, TimeGrid, WeightedMeasure};
use crate::reference::oracle::OracleSolution;
use crate::reference::{sample_paths, SamplingOptions, SdeSpec};
use crate::rng::derive_seed;

/// Samples below which binned entropy estimates are not trusted.
pub const MIN_BINNED_SAMPLES: usize = 500;

/// Quantile atoms used to represent a Gaussian marginal in W₁ distances.
const GAUSSIAN_ATOMS: usize = 4000;

/// Gaussian law of `X_t` under the oracle minimizer. The tilt is affine in
/// the path, so it shifts the reference mean and keeps its variance.
pub fn oracle_marginal(spec: &SdeSpec, oracle: &OracleSolution, t: f64) -> Result<(f64, f64)> {
    let var = spec
        .gaussian_covariance(t, t)
        .ok_or_else(|| Error::Precondition("oracle marginals need a Gaussian reference".into()))?;
    Ok(((oracle.mean_curve)(t), var))
}

fn gaussian_atoms(mean: f64, var: f64) -> Result<Empirical1d> {
    let law = Normal::new(mean, var.sqrt()).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Empirical1d::from_quantiles(|p| law.inverse_cdf(p), GAUSSIAN_ATOMS)
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ConditioningConfig {
    /// Particles per block.
    pub n: usize,
    pub target_accepted: usize,
    /// Blocks pass when every node's empirical mean of `ψ` is `≤ eps`.
    pub eps: f64,
    pub seed: u64,
    pub max_blocks: usize,
    /// Blocks simulated per batch; fixes the random-stream layout.
    pub batch_blocks: usize,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self { n: 16, target_accepted: 1000, eps: 0.0, seed: 0, max_blocks: 5_000_000, batch_blocks: 4096 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditioningRow {
    pub n: usize,
    pub eps: f64,
    pub accepted: usize,
    pub drawn: usize,
    pub acceptance_rate: f64,
    /// Mean and standard error of the first particle at each node.
    pub first_particle_mean_curve: Vec<(f64, f64)>,
    /// W₁ to the oracle marginal at each node, when an oracle is given.
    pub w1_to_oracle: Option<Vec<f64>>,
    #[serde(skip)]
    pub first_particles: Vec<Vec<f64>>,
}

impl ConditioningRow {
    pub fn terminal_samples(&self) -> &[f64] {
        self.first_particles.last().map_or(&[], Vec::as_slice)
    }

    pub fn w1_terminal(&self) -> Option<f64> {
        self.w1_to_oracle.as_ref().and_then(|v| v.last().copied())
    }
}

/// Law of the first particle of an `N`-block given that the block's empirical
/// marginal constraint holds at every node, by exact block rejection.
pub fn condition_by_rejection(
    spec: &SdeSpec,
    grid: &TimeGrid,
    c: &LinearConstraint,
    cfg: &ConditioningConfig,
    oracle: Option<&OracleSolution>,
) -> Result<ConditioningRow> {
    if cfg.n == 0 || cfg.target_accepted == 0 || cfg.batch_blocks == 0 || !(cfg.eps >= 0.0) {
        return Err(Error::InvalidInput("conditioning needs n, target, batch ≥ 1 and eps ≥ 0".into()));
    }
    let m1 = grid.len();
    let d = spec.dim;
    let mut first: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.target_accepted); m1];
    let mut accepted = 0;
    let mut drawn = 0;
    let mut batch = 0u64;
    let opts = SamplingOptions { substeps: 1, ..SamplingOptions::default() };
    while accepted < cfg.target_accepted {
        if drawn >= cfg.max_blocks {
            if accepted == 0 {
                return Err(Error::ConstraintTooRare { accepted, drawn });
            }
            break;
        }
        let blocks = cfg.batch_blocks.min(cfg.max_blocks - drawn);
        let ens = sample_paths(spec, grid, blocks * cfg.n, derive_seed(cfg.seed, batch), &opts)?;
        batch += 1;
        let pass: Vec<bool> = (0..blocks)
            .into_par_iter()
            .map(|b| {
                (0..m1).all(|j| {
                    let s: f64 = (0..cfg.n).map(|i| c.eval(ens.state(b * cfg.n + i, j))).sum();
                    s / cfg.n as f64 <= cfg.eps
                })
            })
            .collect();
        for (b, ok) in pass.into_iter().enumerate() {
            drawn += 1;
            if ok {
                let path = ens.path(b * cfg.n);
                for (j, col) in first.iter_mut().enumerate() {
                    col.push(path[j * d]);
                }
                accepted += 1;
                if accepted == cfg.target_accepted {
                    break;
                }
            }
        }
    }
    let uniform = WeightedMeasure::uniform(accepted);
    let first_particle_mean_curve = first.iter().map(|col| uniform.mean_and_se(col)).collect();
    let w1_to_oracle = match oracle {
        Some(o) => Some(
            grid.nodes()
                .iter()
                .zip(&first)
                .map(|(&t, col)| {
                    let (mean, var) = oracle_marginal(spec, o, t)?;
                    Ok(wasserstein1_1d(&Empirical1d::uniform(col)?, &gaussian_atoms(mean, var)?))
                })
                .collect::<Result<Vec<f64>>>()?,
        ),
        None => None,
    };
    Ok(ConditioningRow {
        n: cfg.n,
        eps: cfg.eps,
        accepted,
        drawn,
        acceptance_rate: accepted as f64 / drawn as f64,
        first_particle_mean_curve,
        w1_to_oracle,
        first_particles: first,
    })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CsiszarCheck {
    pub n: usize,
    /// Binned `H(L(X¹_T | A) | μ̄_T)`.
    pub lhs: f64,
    /// `-(1/N) log P(A) - H(μ̄|ν)`.
    pub rhs: f64,
    /// Binning bias plus Monte Carlo standard errors of both sides.
    pub error_estimate: f64,
    pub bins: usize,
    pub pass: bool,
    pub inconclusive: bool,
}

/// Checks `H(L(X¹|A)|μ̄) ≤ -(1/N) log Πᴺ(A) - H(μ̄|ν)` on the terminal
/// marginal. Histogram widths follow Freedman–Diaconis; the terminal
/// entropy never exceeds the path entropy, so this is a valid one-sided test.
pub fn csiszar_bound_check(row: &ConditioningRow, terminal: (f64, f64), oracle_entropy: f64) -> Result<CsiszarCheck> {
    let samples = row.terminal_samples();
    let n = samples.len();
    let nf = n as f64;
    let p = row.acceptance_rate;
    let rhs = -p.ln() / row.n as f64 - oracle_entropy;
    let se_rhs = ((1.0 - p) / (p * row.drawn as f64)).sqrt() / row.n as f64;
    if n < MIN_BINNED_SAMPLES {
        return Ok(CsiszarCheck {
            n: row.n,
            lhs: f64::NAN,
            rhs,
            error_estimate: f64::NAN,
            bins: 0,
            pass: false,
            inconclusive: true,
        });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |u: f64| sorted[((u * (nf - 1.0)).round() as usize).min(n - 1)];
    let iqr = q(0.75) - q(0.25);
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let width = if iqr > 0.0 { 2.0 * iqr / nf.cbrt() } else { (hi - lo).max(1e-12) };
    let bins = (((hi - lo) / width).ceil() as usize).max(1);
    let law = Normal::new(terminal.0, terminal.1.sqrt()).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut counts = vec![0usize; bins];
    for &x in &sorted {
        counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let mut terms = Vec::with_capacity(bins);
    for (k, &cnt) in counts.iter().enumerate() {
        if cnt == 0 {
            continue;
        }
        // Outer bins absorb the tails so the oracle masses sum to one.
        let a = if k == 0 { f64::NEG_INFINITY } else { lo + k as f64 * width };
        let b = if k == bins - 1 { f64::INFINITY } else { lo + (k + 1) as f64 * width };
        let qk = (law.cdf(b) - law.cdf(a)).max(f64::MIN_POSITIVE);
        let pk = cnt as f64 / nf;
        terms.push((pk, (pk / qk).ln()));
    }
    let lhs: f64 = terms.iter().map(|(pk, l)| pk * l).sum();
    let var_log: f64 = terms.iter().map(|(pk, l)| pk * (l - lhs).powi(2)).sum();
    let error_estimate = (bins.saturating_sub(1)) as f64 / (2.0 * nf) + (var_log / nf).sqrt() + se_rhs;
    Ok(CsiszarCheck {
        n: row.n,
        lhs,
        rhs,
        error_estimate,
        bins,
        pass: lhs <= rhs + 3.0 * error_estimate,
        inconclusive: false,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityRow {
    pub eps: f64,
    /// `Ī_ε = H(μ̄_ε|ν)` on the particle approximation.
    pub value: f64,
    pub mass: f64,
    /// `H(μ̄₀|μ̄_ε)` between the particle solutions.
    pub relative_entropy_to_base: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeCheck {
    pub eps_lo: f64,
    pub eps_hi: f64,
    /// `(Ī_lo - Ī_hi) / (eps_hi - eps_lo)`.
    pub fd_slope: f64,
    /// Multiplier mass solved at the midpoint.
    pub midpoint_mass: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
    pub slopes: Vec<SlopeCheck>,
    /// `Ī_ε` non-increasing within `1e-10` along the sweep.
    pub monotone: bool,
    /// `λ̄₀(𝒯)`; convexity of `ε ↦ Ī_ε` gives `H(μ̄₀|μ̄_ε) ≤ λ̄₀(𝒯) ε`.
    pub c_stab: f64,
    /// `max_ε H(μ̄₀|μ̄_ε) / ε` over `ε > 0`.
    pub max_ratio: f64,
}

fn solve_relaxed(psi: &PsiMatrix, eps: f64, cfg: &DualConfig) -> Result<GibbsSolution> {
    solve_projected_ascent(&psi.shifted(-eps), &[], cfg, None)
}

/// Solves the ε-relaxed problems `ψ ← ψ - ε` on one shared ensemble.
/// Cells run in parallel; each is deterministic.
pub fn stability_sweep(psi: &PsiMatrix, eps: &[f64], cfg: &DualConfig) -> Result<StabilityReport> {
    if eps.is_empty() || eps.iter().any(|e| !(*e >= 0.0)) || eps.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("eps list must be nonnegative and strictly increasing".into()));
    }
    let sols: Vec<GibbsSolution> =
        eps.par_iter().map(|&e| solve_relaxed(psi, e, cfg)).collect::<Result<Vec<_>>>()?;
    let mids: Vec<GibbsSolution> = eps
        .par_windows(2)
        .map(|w| solve_relaxed(psi, 0.5 * (w[0] + w[1]), cfg))
        .collect::<Result<Vec<_>>>()?;
    let base = &sols[0].measure;
    let rows: Vec<StabilityRow> = eps
        .iter()
        .zip(&sols)
        .map(|(&e, s)| StabilityRow {
            eps: e,
            value: s.primal_value,
            mass: s.mass,
            relative_entropy_to_base: base.relative_entropy_to(&s.measure),
            converged: s.converged,
            iterations: s.iterations,
        })
        .collect();
    let slopes = rows
        .windows(2)
        .zip(&mids)
        .map(|(w, mid)| {
            let fd_slope = (w[0].value - w[1].value) / (w[1].eps - w[0].eps);
            let rel = if mid.mass > 0.0 { (fd_slope - mid.mass).abs() / mid.mass } else { fd_slope.abs() };
            SlopeCheck { eps_lo: w[0].eps, eps_hi: w[1].eps, fd_slope, midpoint_mass: mid.mass, relative_error: rel }
        })
        .collect();
    let monotone = rows.windows(2).all(|w| w[1].value <= w[0].value + 1e-10);
    let max_ratio = rows
        .iter()
        .filter(|r| r.eps > 0.0)
        .map(|r| r.relative_entropy_to_base / (r.eps - eps[0]))
        .fold(0.0, f64::max);
    Ok(StabilityReport { c_stab: rows[0].mass, rows, slopes, monotone, max_ratio })
}

/// One perturbation family indexed by `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// No perturbation.
    Identity,
    /// `ψ_k = ψ + scale / k`.
    PsiShift { scale: f64 },
    /// `dν_k/dν ∝ exp(-θ (X_T - X_0) / k)`: an exponential tilt equivalent to a
    /// constant drift change of order `θ/k` for Brownian references.
    DriftTilt { theta: f64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct WeakStabilityRow {
    pub k: usize,
    /// `max_j W₁(μ̄_{k,t_j}, μ̄_{t_j})`.
    pub w1: f64,
    pub mass: f64,
    pub converged: bool,
}

fn node_w1(ens: &PathEnsemble, a: &WeightedMeasure, b: &WeightedMeasure) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for j in 0..ens.grid().len() {
        let x = ens.marginal(j, 0);
        let d = wasserstein1_1d(&Empirical1d::new(&x, a.weights())?, &Empirical1d::new(&x, b.weights())?);
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Solves the perturbed instances `(ν_k, ψ_k)` on a shared ensemble and
/// compares their node marginals with the unperturbed solution.
pub fn weak_stability_run(
    ens: &PathEnsemble,
    psi: &PsiMatrix,
    perturbation: Perturbation,
    ks: &[usize],
    cfg: &DualConfig,
) -> Result<(GibbsSolution, Vec<WeakStabilityRow>)> {
    if ks.contains(&0) {
        return Err(Error::InvalidInput("schedule indices must be positive".into()));
    }
    let base = solve_projected_ascent(psi, &[], cfg, None)?;
    let rows = ks
        .par_iter()
        .map(|&k| {
            let kf = k as f64;
            let sol = match perturbation {
                Perturbation::Identity => solve_projected_ascent(psi, &[], cfg, None)?,
                Perturbation::PsiShift { scale } => solve_projected_ascent(&psi.shifted(scale / kf), &[], cfg, None)?,
                Perturbation::DriftTilt { theta } => {
                    let m = ens.grid().steps();
                    let f: Vec<f64> = (0..ens.n_paths())
                        .map(|i| theta * (ens.state(i, m)[0] - ens.state(i, 0)[0]) / kf)
                        .collect();
                    solve_projected_ascent(psi, &f, cfg, None)?
                }
            };
            Ok(WeakStabilityRow {
                k,
                w1: node_w1(ens, &sol.measure, &base.measure)?,
                mass: sol.mass,
                converged: sol.converged,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((base, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::evaluate_psi_matrix;
    use crate::reference::oracle::gaussian_oracle;
    use crate::reference::TimeProfile;

    fn case_one() -> SdeSpec {
        SdeSpec::drifted_bm(-0.5, 1.0, TimeProfile::polynomial(&[0.0, 1.0]))
    }

    #[test]
    fn oracle_marginal_case_one() {
        let spec = case_one();
        let o = gaussian_oracle(&spec, 1.0).unwrap();
        let (m, v) = oracle_marginal(&spec, &o, 1.0).unwrap();
        assert!(m.abs() < 1e-12);
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn never_binding_constraint_accepts_everything() {
        let spec = case_one();
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let c = LinearConstraint::linear_mean(1e6);
        let cfg = ConditioningConfig { n: 4, target_accepted: 600, seed: 3, ..Default::default() };
        let row = condition_by_rejection(&spec, &grid, &c, &cfg, None).unwrap();
        assert_eq!(row.acceptance_rate, 1.0);
        let (m, se) = row.first_particle_mean_curve[5];
        assert!((m - 0.5).abs() <= 3.0 * se);
        // Reference law as its own oracle: rhs = 0, lhs is binning noise.
        let check = csiszar_bound_check(&row, (0.5, 2.0), 0.0).unwrap();
        assert!(check.pass && check.rhs == 0.0, "{check:?}");
    }

    #[test]
    fn impossible_constraint_is_too_rare() {
        let spec = case_one();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let c = LinearConstraint::linear_mean(-1e3);
        let cfg = ConditioningConfig { n: 2, target_accepted: 10, max_blocks: 100, batch_blocks: 50, ..Default::default() };
        assert!(matches!(
            condition_by_rejection(&spec, &grid, &c, &cfg, None),
            Err(Error::ConstraintTooRare { accepted: 0, drawn: 100 })
        ));
    }

    #[test]
    fn rejection_is_deterministic() {
        let spec = case_one();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let c = LinearConstraint::linear_mean(0.0);
        let cfg = ConditioningConfig { n: 3, target_accepted: 50, seed: 9, batch_blocks: 16, ..Default::default() };
        let a = condition_by_rejection(&spec, &grid, &c, &cfg, None).unwrap();
        let b = condition_by_rejection(&spec, &grid, &c, &cfg, None).unwrap();
        assert_eq!(a.first_particles, b.first_particles);
        assert_eq!(a.drawn, b.drawn);
    }

    #[test]
    fn sweep_beyond_worst_violation_is_vacuous() {
        let spec = case_one();
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let ens = sample_paths(&spec, &grid, 400, 1, &SamplingOptions::default()).unwrap();
        let psi = evaluate_psi_matrix(&ens, &LinearConstraint::linear_mean(0.0)).unwrap();
        let rep = stability_sweep(&psi, &[0.0, 0.2, 0.6, 1.0], &DualConfig::default()).unwrap();
        assert!(rep.monotone);
        assert_eq!(rep.rows[3].mass, 0.0);
        assert!(rep.rows[3].value.abs() < 1e-12);
        assert!(rep.max_ratio <= rep.c_stab * (1.0 + 1e-6) + 1e-9);
    }

    #[test]
    fn identity_schedule_has_zero_distance() {
        let spec = case_one();
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let ens = sample_paths(&spec, &grid, 400, 1, &SamplingOptions::default()).unwrap();
        let psi = evaluate_psi_matrix(&ens, &LinearConstraint::linear_mean(0.0)).unwrap();
        let (_, rows) = weak_stability_run(&ens, &psi, Perturbation::Identity, &[1, 2], &DualConfig::default()).unwrap();
        assert!(rows.iter().all(|r| r.w1 == 0.0));
    }
}
