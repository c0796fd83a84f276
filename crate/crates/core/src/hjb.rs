//! Feynman–Kac potential `φ` and its checks.
//!
//! `φ_t(x) = -log E exp[-∫_t^T c_s(Z_s) ds - ∫_{[t,T]} ψ_s(Z_s) λ(ds)]`
//! with `Z` the reference diffusion started at `(t, x)`. Atoms of `λ` at the
//! query time are included (closed interval, right-limit convention).

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::{Multiplier, PathEnsemble, TimeGrid, WeightedMeasure};
use crate::numeric::{compensated_sum, gauss_hermite_normal};
use crate::reference::{sample_from, Family, GradPhi, SamplingOptions, SdeSpec};
use crate::rng::derive_seed;

/// `(t, x) ↦ value`.
pub type TimeStateFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct HjbQuery {
    pub sde: SdeSpec,
    /// Nodes carrying the atoms of `lambda`.
    pub grid: TimeGrid,
    /// Running cost; `None` means `c ≡ 0`.
    pub c: Option<TimeStateFn>,
    pub psi: TimeStateFn,
    pub lambda: Multiplier,
    pub mc_paths: usize,
    pub seed: u64,
    pub fd_step: f64,
    pub sampling: SamplingOptions,
}

impl HjbQuery {
    pub fn new(sde: SdeSpec, grid: TimeGrid, psi: TimeStateFn, lambda: Multiplier) -> Result<Self> {
        let q = Self {
            sde,
            grid,
            c: None,
            psi,
            lambda,
            mc_paths: 10_000,
            seed: 0,
            fd_step: 1e-2,
            sampling: SamplingOptions::default(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc_paths == 0 {
            return Err(Error::InvalidInput("mc_paths must be at least 1".into()));
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return Err(Error::InvalidInput("fd_step must be positive".into()));
        }
        if self.lambda.len() != self.grid.len() {
            return Err(Error::InvalidInput("multiplier length must match the grid".into()));
        }
        Ok(())
    }

    fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    /// Simulation nodes from `t` on, and the grid index of each (`None` for
    /// an off-grid start).
    fn remaining(&self, t: f64) -> Result<(Vec<f64>, Vec<Option<usize>>)> {
        let horizon = self.horizon();
        if !(0.0..=horizon + 1e-12).contains(&t) {
            return Err(Error::InvalidInput(format!("t = {t} outside [0, {horizon}]")));
        }
        let first = self.grid.first_at_or_after(t);
        let nodes = self.grid.nodes();
        let mut times = Vec::new();
        let mut idx = Vec::new();
        if first >= nodes.len() || (nodes[first] - t).abs() > 1e-12 {
            times.push(t);
            idx.push(None);
        }
        for (j, &s) in nodes.iter().enumerate().skip(first) {
            times.push(s);
            idx.push(Some(j));
        }
        Ok((times, idx))
    }

    /// Per-path exponents `-∫c - Σ λ_j ψ(t_j, Z_j)` for starts at `x`.
    fn exponents(&self, t: f64, x: &[f64], stream_seed: u64) -> Result<Vec<f64>> {
        let (times, idx) = self.remaining(t)?;
        let d = self.sde.dim;
        let n = self.mc_paths;
        let len = times.len();
        let states = if len > 1 {
            sample_from(&self.sde, &times, x, n, stream_seed, &self.sampling)?
        } else {
            x.repeat(n)
        };
        let lam = self.lambda.atoms();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let path = &states[i * len * d..(i + 1) * len * d];
            let mut a = 0.0;
            for k in 0..len {
                let z = &path[k * d..(k + 1) * d];
                if let Some(j) = idx[k] {
                    if lam[j] != 0.0 {
                        a -= lam[j] * (self.psi)(times[k], z);
                    }
                }
                if let Some(c) = &self.c {
                    let w = 0.5
                        * (if k > 0 { times[k] - times[k - 1] } else { 0.0 }
                            + if k + 1 < len { times[k + 1] - times[k] } else { 0.0 });
                    a -= w * c(times[k], z);
                }
            }
            if !a.is_finite() {
                return Err(Error::NonFiniteIntegrand(format!("Feynman–Kac exponent of path {i}")));
            }
            out.push(a);
        }
        Ok(out)
    }

    fn stream_for(&self, t: f64) -> u64 {
        derive_seed(self.seed, t.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FkEstimate {
    pub value: f64,
    pub se: f64,
}

/// `-log` of a Monte Carlo mean of `exp(a_i)`, stabilized by the maximum,
/// with a delta-method standard error.
fn neg_log_mean_exp(a: &[f64]) -> FkEstimate {
    let n = a.len() as f64;
    let amax = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - amax).exp()).collect();
    let mean = compensated_sum(e.iter().copied()) / n;
    let var = compensated_sum(e.iter().map(|v| (v - mean).powi(2))) / (n - 1.0).max(1.0);
    FkEstimate { value: -(amax + mean.ln()), se: (var / n).sqrt() / mean }
}

/// Monte Carlo Feynman–Kac estimate of `φ_t(x)`. Deterministic given the
/// query seed; every `x` at the same `t` shares random numbers.
pub fn feynman_kac_phi(q: &HjbQuery, t: f64, x: &[f64]) -> Result<FkEstimate> {
    q.validate()?;
    if x.len() != q.sde.dim {
        return Err(Error::InvalidInput("state dimension mismatch".into()));
    }
    Ok(neg_log_mean_exp(&q.exponents(t, x, q.stream_for(t))?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientEstimate {
    pub value: Vec<f64>,
    pub se: Vec<f64>,
}

/// Central differences `(φ(x + h e_k) - φ(x - h e_k)) / 2h` with common random
/// numbers across the two shifts.
pub fn gradient_phi(q: &HjbQuery, t: f64, x: &[f64]) -> Result<GradientEstimate> {
    q.validate()?;
    let d = q.sde.dim;
    if x.len() != d {
        return Err(Error::InvalidInput("state dimension mismatch".into()));
    }
    let h = q.fd_step;
    let seed = q.stream_for(t);
    let mut value = Vec::with_capacity(d);
    let mut se = Vec::with_capacity(d);
    for k in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += h;
        xm[k] -= h;
        let ap = q.exponents(t, &xp, seed)?;
        let am = q.exponents(t, &xm, seed)?;
        let fp = neg_log_mean_exp(&ap);
        let fm = neg_log_mean_exp(&am);
        value.push((fp.value - fm.value) / (2.0 * h));
        // Delta method on the pair: influence of path i on the difference.
        let n = ap.len() as f64;
        let (mp, mm) = (-fp.value, -fm.value);
        let u: Vec<f64> = ap
            .iter()
            .zip(&am)
            .map(|(a, b)| -((a - mp).exp() - (b - mm).exp()) / (2.0 * h))
            .collect();
        let mu = compensated_sum(u.iter().copied()) / n;
        let var = compensated_sum(u.iter().map(|v| (v - mu).powi(2))) / (n - 1.0).max(1.0);
        se.push((var / n).sqrt());
    }
    Ok(GradientEstimate { value, se })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GirsanovReport {
    /// Pearson correlation between the two normalized weight vectors.
    pub correlation: f64,
    /// `mean_i |N w^a_i - N w^b_i|`.
    pub mean_abs_deviation: f64,
    pub ess_a: f64,
    pub ess_b: f64,
}

/// Compares two tilts of reference-sampled paths: the Gibbs density
/// `V_a = -∫c - Σλψ` and the Girsanov route
/// `V_b = -φ₀(x₀) - Σ ∇φ(t_j, X_j)(ΔX_j - b ΔT) - ½ Σ |σ∇φ|² Δt`.
///
/// Needs `d = 1`. The stochastic integral is the left-point Itô sum on the
/// ensemble grid, so the deviation is first order in the mesh.
pub fn girsanov_density_check(
    q: &HjbQuery,
    phi0: &(dyn Fn(f64) -> f64 + Sync),
    grad_phi: GradPhi<'_>,
    reference: &PathEnsemble,
) -> Result<GirsanovReport> {
    if q.sde.dim != 1 || reference.dim() != 1 {
        return Err(Error::Precondition("Girsanov check is one-dimensional".into()));
    }
    let grid = reference.grid();
    if grid.nodes() != q.grid.nodes() {
        return Err(Error::InvalidInput("ensemble grid must match the query grid".into()));
    }
    let nodes = grid.nodes();
    let lam = q.lambda.atoms();
    let trap = grid.trapezoid_weights();
    let n = reference.n_paths();
    let mut va = Vec::with_capacity(n);
    let mut vb = Vec::with_capacity(n);
    let (mut b, mut sig, mut g) = ([0.0], [0.0], [0.0]);
    for i in 0..n {
        let p = reference.path(i);
        let mut a = 0.0;
        for j in 0..nodes.len() {
            if lam[j] != 0.0 {
                a -= lam[j] * (q.psi)(nodes[j], &p[j..j + 1]);
            }
            if let Some(c) = &q.c {
                a -= trap[j] * c(nodes[j], &p[j..j + 1]);
            }
        }
        let mut l = -phi0(p[0]);
        for j in 0..grid.steps() {
            let (t0, t1) = (nodes[j], nodes[j + 1]);
            let dt = t1 - t0;
            let x = &p[j..j + 1];
            let mean_incr = match &q.sde.family {
                Family::DriftedBm(prof) => (prof.value)(t1) - (prof.value)(t0),
                _ => {
                    (q.sde.drift)(t0, x, &mut b);
                    b[0] * dt
                }
            };
            (q.sde.diffusion)(t0, x, &mut sig);
            grad_phi(t0, x, &mut g);
            l -= g[0] * (p[j + 1] - p[j] - mean_incr) + 0.5 * (sig[0] * g[0]).powi(2) * dt;
        }
        if !(a.is_finite() && l.is_finite()) {
            return Err(Error::NonFiniteIntegrand(format!("Girsanov weights of path {i}")));
        }
        va.push(-a);
        vb.push(-l);
    }
    let wa = WeightedMeasure::tilt(&va)?;
    let wb = WeightedMeasure::tilt(&vb)?;
    let nf = n as f64;
    let mad = compensated_sum(wa.weights().iter().zip(wb.weights()).map(|(x, y)| (nf * x - nf * y).abs())) / nf;
    let ma = 1.0 / nf;
    let cov = compensated_sum(wa.weights().iter().zip(wb.weights()).map(|(x, y)| (x - ma) * (y - ma)));
    let sa = compensated_sum(wa.weights().iter().map(|x| (x - ma).powi(2))).sqrt();
    let sb = compensated_sum(wb.weights().iter().map(|y| (y - ma).powi(2))).sqrt();
    let correlation = if sa == 0.0 && sb == 0.0 {
        1.0
    } else if sa == 0.0 || sb == 0.0 {
        0.0
    } else {
        cov / (sa * sb)
    };
    Ok(GirsanovReport {
        correlation,
        mean_abs_deviation: mad,
        ess_a: wa.effective_sample_size(),
        ess_b: wb.effective_sample_size(),
    })
}

/// `φ` sampled on a `(t, x)` lattice, row-major in time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhiLattice {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
}

impl PhiLattice {
    pub fn from_fn(times: Vec<f64>, xs: Vec<f64>, phi: impl Fn(f64, f64) -> f64) -> Self {
        let values = times.iter().flat_map(|&t| xs.iter().map(move |&x| (t, x))).map(|(t, x)| phi(t, x)).collect();
        Self { times, xs, values }
    }

    fn row(&self, k: usize) -> &[f64] {
        let nx = self.xs.len();
        &self.values[k * nx..(k + 1) * nx]
    }

    /// Linear interpolation in `x` at time row `k`, linear extrapolation
    /// outside the lattice. Returns `(φ, ∂ₓφ)`.
    fn eval(&self, k: usize, x: f64) -> (f64, f64) {
        let xs = &self.xs;
        let row = self.row(k);
        let nx = xs.len();
        let i = xs.partition_point(|&v| v <= x).clamp(1, nx - 1) - 1;
        let slope = (row[i + 1] - row[i]) / (xs[i + 1] - xs[i]);
        let val = row[i] + slope * (x - xs[i]);
        // Gradient from lattice central differences, interpolated linearly.
        let g = |m: usize| {
            if m == 0 {
                (row[1] - row[0]) / (xs[1] - xs[0])
            } else if m == nx - 1 {
                (row[m] - row[m - 1]) / (xs[m] - xs[m - 1])
            } else {
                (row[m + 1] - row[m - 1]) / (xs[m + 1] - xs[m - 1])
            }
        };
        let u = ((x - xs[i]) / (xs[i + 1] - xs[i])).clamp(0.0, 1.0);
        (val, (1.0 - u) * g(i) + u * g(i + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MildReport {
    /// `max |φ - RHS|` over lattice nodes with interior `x`.
    pub residual: f64,
    /// Bound on the linear-interpolation error, `max |Δ²ₓφ| / 8`.
    pub interpolation_error: f64,
    pub inconclusive: bool,
    /// `false` when `σ` varies in `x`; nothing is evaluated then.
    pub applicable: bool,
}

/// Checks the mild (Duhamel) form
/// `φ_t = ∫_t^T S_{t,s}[b ∂ₓφ - ½ σ² (∂ₓφ)² + c] ds + Σ_{t_j ≥ t} λ_j S_{t,t_j}[ψ]`
/// with `S_{t,s}` the Gaussian convolution of variance `σ²(s - t)`.
///
/// The `s` integral is trapezoidal on the lattice times, the convolution is
/// Gauss–Hermite with `quad_nodes` points. Atoms of `λ` are read from the
/// query grid and must sit on lattice times.
pub fn mild_residual(q: &HjbQuery, lattice: &PhiLattice, quad_nodes: usize) -> Result<MildReport> {
    if q.sde.dim != 1 {
        return Err(Error::Precondition("mild residual is one-dimensional".into()));
    }
    let (nt, nx) = (lattice.times.len(), lattice.xs.len());
    if nt < 2 || nx < 3 || lattice.values.len() != nt * nx {
        return Err(Error::InvalidInput("lattice needs ≥ 2 times, ≥ 3 points, matching values".into()));
    }
    let sigma = match q.sde.family {
        Family::DriftedBm(_) | Family::Ou => 1.0,
        Family::Custom => {
            let mut s = [0.0];
            let mut vals = Vec::new();
            for &t in &[lattice.times[0], lattice.times[nt - 1]] {
                for &x in &[lattice.xs[0], lattice.xs[nx / 2], lattice.xs[nx - 1]] {
                    (q.sde.diffusion)(t, &[x], &mut s);
                    vals.push(s[0]);
                }
            }
            if vals.iter().any(|v| (v - vals[0]).abs() > 1e-14) {
                return Ok(MildReport {
                    residual: f64::NAN,
                    interpolation_error: f64::NAN,
                    inconclusive: true,
                    applicable: false,
                });
            }
            vals[0]
        }
    };
    let atoms: Vec<(f64, f64)> = q.lambda.support(&q.grid);
    for (s, _) in &atoms {
        if !lattice.times.iter().any(|t| (t - s).abs() <= 1e-12) {
            return Err(Error::InvalidInput(format!("multiplier atom at {s} is not a lattice time")));
        }
    }
    let (z, wz) = gauss_hermite_normal(quad_nodes);
    let mut b = [0.0];
    let drift = |t: f64, x: f64, b: &mut [f64; 1]| match &q.sde.family {
        Family::DriftedBm(p) => (p.rate)(t),
        _ => {
            (q.sde.drift)(t, &[x], b);
            b[0]
        }
    };
    // Source term F_s(y) at lattice row k.
    let source = |k: usize, y: f64, b: &mut [f64; 1]| {
        let s = lattice.times[k];
        let (_, g) = lattice.eval(k, y);
        let c = q.c.as_ref().map_or(0.0, |c| c(s, &[y]));
        drift(s, y, b) * g - 0.5 * sigma * sigma * g * g + c
    };
    let mut residual: f64 = 0.0;
    for k in 0..nt {
        let t = lattice.times[k];
        for i in 1..nx - 1 {
            let x = lattice.xs[i];
            let mut rhs = 0.0;
            for m in k..nt {
                let s = lattice.times[m];
                let w = 0.5
                    * (if m > k { s - lattice.times[m - 1] } else { 0.0 }
                        + if m + 1 < nt { lattice.times[m + 1] - s } else { 0.0 });
                if w == 0.0 {
                    continue;
                }
                let sd = sigma * (s - t).sqrt();
                let conv: f64 = z.iter().zip(&wz).map(|(zi, wi)| wi * source(m, x + sd * zi, &mut b)).sum();
                rhs += w * conv;
            }
            for &(s, l) in &atoms {
                if s >= t - 1e-12 {
                    let sd = sigma * (s - t).max(0.0).sqrt();
                    rhs += l * z.iter().zip(&wz).map(|(zi, wi)| wi * (q.psi)(s, &[x + sd * zi])).sum::<f64>();
                }
            }
            residual = residual.max((lattice.row(k)[i] - rhs).abs());
        }
    }
    let mut interp: f64 = 0.0;
    for k in 0..nt {
        let row = lattice.row(k);
        for i in 1..nx - 1 {
            interp = interp.max((row[i + 1] - 2.0 * row[i] + row[i - 1]).abs() / 8.0);
        }
    }
    Ok(MildReport {
        residual,
        interpolation_error: interp,
        inconclusive: interp > residual.max(1e-6),
        applicable: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::TimeProfile;

    fn bm_query(a: f64, n: usize, profile: &[f64]) -> HjbQuery {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let mut lam = vec![0.0; 11];
        lam[10] = a;
        let mut q = HjbQuery::new(
            SdeSpec::drifted_bm(0.0, 0.0, TimeProfile::polynomial(profile)),
            grid,
            Arc::new(|_, x| x[0]),
            Multiplier::new(lam).unwrap(),
        )
        .unwrap();
        q.mc_paths = n;
        q.seed = 5;
        q
    }

    #[test]
    fn zero_multiplier_gives_zero_potential() {
        let q = bm_query(0.0, 100, &[]);
        let e = feynman_kac_phi(&q, 0.3, &[0.7]).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.se, 0.0);
    }

    #[test]
    fn terminal_atom_closed_form() {
        let q = bm_query(0.25, 100_000, &[]);
        let e = feynman_kac_phi(&q, 0.0, &[0.0]).unwrap();
        assert!((e.value + 0.03125).abs() <= 3.0 * e.se, "{e:?}");
        // Drifted: φ_t(x) = a(x + m(T) - m(t)) - a²(T - t)/2 with m(t) = t.
        let q = bm_query(0.25, 100_000, &[0.0, 1.0]);
        let e = feynman_kac_phi(&q, 0.4, &[0.3]).unwrap();
        let expect = 0.25 * (0.3 + 0.6) - 0.0625 * 0.6 / 2.0;
        assert!((e.value - expect).abs() <= 3.0 * e.se, "{e:?} vs {expect}");
    }

    #[test]
    fn off_grid_start_and_atom_at_query_time() {
        let q = bm_query(0.25, 20_000, &[]);
        let e = feynman_kac_phi(&q, 0.35, &[0.0]).unwrap();
        assert!((e.value + 0.0625 * 0.65 / 2.0).abs() <= 3.0 * e.se);
        // At t = T only the atom remains: φ_T(x) = a x exactly.
        let e = feynman_kac_phi(&q, 1.0, &[2.0]).unwrap();
        assert_eq!(e.value, 0.5);
        assert!(matches!(feynman_kac_phi(&q, 1.5, &[0.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn crn_gradient_is_exact_for_linear_psi() {
        let q = bm_query(0.25, 2_000, &[]);
        let g = gradient_phi(&q, 0.0, &[0.1]).unwrap();
        assert!((g.value[0] - 0.25).abs() < 1e-10);
        assert!(g.se[0] < 1e-10);
    }

    #[test]
    fn symmetric_instance_has_zero_gradient_at_origin() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let mut q = HjbQuery::new(
            SdeSpec::drifted_bm(0.0, 0.0, TimeProfile::polynomial(&[])),
            grid,
            Arc::new(|_, x| x[0] * x[0]),
            Multiplier::new(vec![0.0, 0.3, 0.0, 0.0, 0.5]).unwrap(),
        )
        .unwrap();
        q.c = Some(Arc::new(|_, x| 0.2 * x[0].powi(4)));
        q.mc_paths = 20_000;
        let g = gradient_phi(&q, 0.0, &[0.0]).unwrap();
        assert!(g.value[0].abs() <= 3.0 * g.se[0] + 1e-12, "{g:?}");
    }

    #[test]
    fn mild_form_of_affine_solution() {
        let q = bm_query(0.25, 1, &[]);
        let times = q.grid.nodes().to_vec();
        let xs: Vec<f64> = (0..200).map(|i| -4.0 + 8.0 * i as f64 / 199.0).collect();
        let phi = PhiLattice::from_fn(times.clone(), xs.clone(), |t, x| 0.25 * x - 0.03125 * (1.0 - t));
        let r = mild_residual(&q, &phi, 20).unwrap();
        assert!(r.residual < 1e-12 && !r.inconclusive, "{r:?}");
        let bumped = PhiLattice::from_fn(times, xs, |t, x| 0.25 * x - 0.03125 * (1.0 - t) + 0.1);
        assert!(mild_residual(&q, &bumped, 20).unwrap().residual >= 0.09);
    }
}
