//! Particle representation of path-space probability measures.
//!
//! A [`PathEnsemble`] holds `N` discretized paths sampled from a reference
//! law ν; a [`WeightedMeasure`] reweights those particles to represent a
//! tilted law μ ≪ ν; a [`Multiplier`] is a nonnegative measure on the time
//! grid stored as one atom per node.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{self, gauss_legendre, par_sum, CompensatedSum};

/// Strictly increasing time nodes `0 = t_0 < … < t_M = T`, `M ≥ 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "time grid needs at least 3 nodes (M >= 2), got {}",
                nodes.len()
            )));
        }
        if nodes[0] != 0.0 {
            return Err(Error::InvalidInput("time grid must start at exactly 0".into()));
        }
        if nodes.iter().any(|t| !t.is_finite()) || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(
                "time grid nodes must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self { nodes })
    }

    /// `steps + 1` equally spaced nodes on `[0, horizon]`; the last node is
    /// exactly `horizon`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        let mut nodes: Vec<f64> =
            (0..=steps).map(|j| horizon * j as f64 / steps as f64).collect();
        if let Some(last) = nodes.last_mut() {
            *last = horizon;
        }
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Number of nodes, `M + 1`.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of intervals `M`.
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().unwrap()
    }

    /// Length of interval `j`, `t_{j+1} - t_j`.
    pub fn dt(&self, j: usize) -> f64 {
        self.nodes[j + 1] - self.nodes[j]
    }

    /// Index of the node equal to `t` (within `1e-12`), if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.nodes.iter().position(|&s| (s - t).abs() <= 1e-12)
    }

    /// First node index `j` with `t_j >= t` (within `1e-12`).
    pub fn first_at_or_after(&self, t: f64) -> usize {
        self.nodes.iter().position(|&s| s >= t - 1e-12).unwrap_or(self.nodes.len())
    }

    /// Trapezoidal quadrature weights, `∫ f ≈ Σ_j w_j f(t_j)`.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let m = self.steps();
        (0..=m)
            .map(|j| {
                let left = if j > 0 { self.dt(j - 1) } else { 0.0 };
                let right = if j < m { self.dt(j) } else { 0.0 };
                0.5 * (left + right)
            })
            .collect()
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(nodes: Vec<f64>) -> Result<Self> {
        Self::new(nodes)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.nodes
    }
}

/// `N` discretized paths on a [`TimeGrid`], values stored row-major as
/// `[path][node][coordinate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    states: Vec<f64>,
}

impl PathEnsemble {
    pub fn new(grid: TimeGrid, n_paths: usize, dim: usize, states: Vec<f64>) -> Result<Self> {
        if n_paths == 0 {
            return Err(Error::InvalidInput("ensemble needs at least one path".into()));
        }
        if !(dim == 1 || dim == 2) {
            return Err(Error::InvalidInput(format!("state dimension must be 1 or 2, got {dim}")));
        }
        if states.len() != n_paths * grid.len() * dim {
            return Err(Error::InvalidInput(format!(
                "state buffer has {} values, expected {}",
                states.len(),
                n_paths * grid.len() * dim
            )));
        }
        if let Some(pos) = states.iter().position(|v| !v.is_finite()) {
            let per_path = grid.len() * dim;
            return Err(Error::InvalidInput(format!(
                "non-finite path value at path {}, node {}",
                pos / per_path,
                (pos % per_path) / dim
            )));
        }
        Ok(Self { grid, n_paths, dim, states })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// Path `i` as a flat `(M+1) × d` slice.
    pub fn path(&self, i: usize) -> &[f64] {
        let stride = self.grid.len() * self.dim;
        &self.states[i * stride..(i + 1) * stride]
    }

    /// State of path `i` at node `j`.
    pub fn state(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.grid.len() + j) * self.dim;
        &self.states[base..base + self.dim]
    }

    /// Coordinate `k` of every path at node `j`.
    pub fn marginal(&self, j: usize, k: usize) -> Vec<f64> {
        (0..self.n_paths).map(|i| self.state(i, j)[k]).collect()
    }

    /// Flat little-endian container: `N, M, d` as `u64`, the `M+1` grid
    /// nodes, then the row-major path values, all as `f64`.
    pub fn write_binary<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(&(self.n_paths as u64).to_le_bytes())?;
        out.write_all(&(self.grid.steps() as u64).to_le_bytes())?;
        out.write_all(&(self.dim as u64).to_le_bytes())?;
        for t in self.grid.nodes() {
            out.write_all(&t.to_le_bytes())?;
        }
        for v in &self.states {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let io_err = |e: io::Error| Error::InvalidInput(format!("ensemble container: {e}"));
        let mut word = [0u8; 8];
        let mut next_u64 = |input: &mut R| -> Result<u64> {
            input.read_exact(&mut word).map_err(io_err)?;
            Ok(u64::from_le_bytes(word))
        };
        let n = next_u64(&mut input)? as usize;
        let m = next_u64(&mut input)? as usize;
        let d = next_u64(&mut input)? as usize;
        let total = n
            .checked_mul(m + 1)
            .and_then(|v| v.checked_mul(d))
            .ok_or_else(|| Error::InvalidInput("ensemble header overflows".into()))?;
        let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; count * 8];
            input.read_exact(&mut buf).map_err(io_err)?;
            Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let nodes = read_f64s(m + 1)?;
        let states = read_f64s(total)?;
        Self::new(TimeGrid::new(nodes)?, n, d, states)
    }

    /// Long-format CSV: `path,node,t,x0[,x1]`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "path,node,t")?;
        for k in 0..self.dim {
            write!(out, ",x{k}")?;
        }
        writeln!(out)?;
        for i in 0..self.n_paths {
            for (j, t) in self.grid.nodes().iter().enumerate() {
                write!(out, "{i},{j},{t}")?;
                for v in self.state(i, j) {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input
            .read_to_string(&mut text)
            .map_err(|e| Error::InvalidInput(format!("ensemble csv: {e}")))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::InvalidInput("empty csv".into()))?;
        let dim = header.split(',').count().saturating_sub(3);
        let mut rows: Vec<(usize, usize, f64, Vec<f64>)> = Vec::new();
        for (ln, line) in lines.enumerate() {
            let bad = || Error::InvalidInput(format!("ensemble csv line {}", ln + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 3 {
                return Err(bad());
            }
            let i = fields[0].parse().map_err(|_| bad())?;
            let j = fields[1].parse().map_err(|_| bad())?;
            let t = fields[2].parse().map_err(|_| bad())?;
            let x = fields[3..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            rows.push((i, j, t, x));
        }
        let n = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let len = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        if rows.len() != n * len {
            return Err(Error::InvalidInput("ensemble csv is not a full path × node table".into()));
        }
        let mut nodes = vec![0.0; len];
        let mut states = vec![0.0; n * len * dim];
        for (i, j, t, x) in rows {
            nodes[j] = t;
            states[(i * len + j) * dim..(i * len + j + 1) * dim].copy_from_slice(&x);
        }
        Self::new(TimeGrid::new(nodes)?, n, dim, states)
    }
}

/// Normalized nonnegative particle weights; the particle approximation of a
/// measure μ ≪ ν.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedMeasure {
    weights: Vec<f64>,
    /// `log((1/N) Σ_i exp(-V_i))` for a tilt; `0` for externally given weights.
    log_normalizer: f64,
}

impl WeightedMeasure {
    pub fn uniform(n: usize) -> Self {
        Self { weights: vec![1.0 / n as f64; n], log_normalizer: 0.0 }
    }

    /// Normalize arbitrary nonnegative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("empty weight vector".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
        }
        let total = numeric::compensated_sum(weights.iter().copied());
        if total <= 0.0 {
            return Err(Error::DegenerateTilt);
        }
        Ok(Self { weights: weights.into_iter().map(|w| w / total).collect(), log_normalizer: 0.0 })
    }

    /// Gibbs tilt `w_i ∝ exp(-V_i)`.
    ///
    /// `+inf` potentials give zero weight; NaN or `-inf` are rejected.
    pub fn tilt(potential: &[f64]) -> Result<Self> {
        if potential.is_empty() {
            return Err(Error::InvalidInput("empty potential".into()));
        }
        if potential.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(Error::InvalidInput("potential must not be NaN or -inf".into()));
        }
        let n = potential.len();
        let vmin = potential.iter().copied().fold(f64::INFINITY, f64::min);
        if vmin == f64::INFINITY {
            return Err(Error::DegenerateTilt);
        }
        let unnorm: Vec<f64> = potential.iter().map(|v| (vmin - v).exp()).collect();
        let total = par_sum(n, |i| unnorm[i]);
        let weights = unnorm.iter().map(|u| u / total).collect();
        let log_normalizer = -vmin + total.ln() - (n as f64).ln();
        Ok(Self { weights, log_normalizer })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `H(μ|ν) = Σ_i w_i log(N w_i)` against uniform particle weights,
    /// with `0 log 0 = 0`.
    pub fn relative_entropy(&self) -> f64 {
        let n = self.weights.len() as f64;
        par_sum(self.weights.len(), |i| {
            let w = self.weights[i];
            if w > 0.0 {
                w * (n * w).ln()
            } else {
                0.0
            }
        })
        .max(0.0)
    }

    /// `Σ_i w_i log(w_i / v_i)`; `+inf` when `self` charges a particle
    /// that `other` does not.
    pub fn relative_entropy_to(&self, other: &WeightedMeasure) -> f64 {
        assert_eq!(self.len(), other.len());
        let mut acc = CompensatedSum::default();
        for (&w, &v) in self.weights.iter().zip(&other.weights) {
            if w > 0.0 {
                if v <= 0.0 {
                    return f64::INFINITY;
                }
                acc.add(w * (w / v).ln());
            }
        }
        acc.total().max(0.0)
    }

    /// Kish effective sample size `1 / Σ w_i²`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / par_sum(self.weights.len(), |i| self.weights[i] * self.weights[i])
    }

    /// Total-variation distance `½ Σ |w_i - v_i|`.
    pub fn total_variation(&self, other: &WeightedMeasure) -> f64 {
        assert_eq!(self.len(), other.len());
        0.5 * par_sum(self.len(), |i| (self.weights[i] - other.weights[i]).abs())
    }

    /// `Σ_i w_i f(i)`.
    pub fn expectation<F: Fn(usize) -> f64 + Sync>(&self, f: F) -> f64 {
        par_sum(self.weights.len(), |i| {
            let w = self.weights[i];
            if w > 0.0 {
                w * f(i)
            } else {
                0.0
            }
        })
    }

    /// Weighted mean of `values` with its self-normalized standard error
    /// `sqrt(Σ w_i² (v_i - mean)²)`.
    pub fn mean_and_se(&self, values: &[f64]) -> (f64, f64) {
        let mean = self.expectation(|i| values[i]);
        let var = par_sum(values.len(), |i| {
            let w = self.weights[i];
            w * w * (values[i] - mean) * (values[i] - mean)
        });
        (mean, var.sqrt())
    }

    /// Convex combination `(1-α) self + α other`.
    pub fn mix(&self, other: &WeightedMeasure, alpha: f64) -> WeightedMeasure {
        let weights =
            self.weights.iter().zip(&other.weights).map(|(a, b)| (1.0 - alpha) * a + alpha * b);
        WeightedMeasure { weights: weights.collect(), log_normalizer: 0.0 }
    }
}

/// `⟨μ_{t_j}, f⟩ = Σ_i w_i f(x^i_{t_j})`.
pub fn time_marginal_moment<F>(
    ensemble: &PathEnsemble,
    measure: &WeightedMeasure,
    f: F,
    node: usize,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if node >= ensemble.grid().len() {
        return Err(Error::NodeOutOfRange { index: node, len: ensemble.grid().len() });
    }
    if measure.len() != ensemble.n_paths() {
        return Err(Error::InvalidInput("measure and ensemble sizes differ".into()));
    }
    Ok(measure.expectation(|i| f(ensemble.state(i, node))))
}

/// A weighted empirical distribution on the real line, sorted by value.
#[derive(Debug, Clone, PartialEq)]
pub struct Empirical1d {
    points: Vec<(f64, f64)>,
}

impl Empirical1d {
    pub fn new(values: &[f64], weights: &[f64]) -> Result<Self> {
        if values.is_empty() || values.len() != weights.len() {
            return Err(Error::InvalidInput("empirical measure needs matching, non-empty inputs".into()));
        }
        let total = numeric::compensated_sum(weights.iter().copied());
        if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("empirical measure needs finite values and positive mass".into()));
        }
        let mut points: Vec<(f64, f64)> =
            values.iter().zip(weights).map(|(&v, &w)| (v, w / total)).collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { points })
    }

    pub fn uniform(values: &[f64]) -> Result<Self> {
        Self::new(values, &vec![1.0; values.len()])
    }

    /// `k` equal-mass atoms at the mid-quantiles `(i + ½)/k` of a law.
    pub fn from_quantiles<Q: Fn(f64) -> f64>(quantile: Q, k: usize) -> Result<Self> {
        let values: Vec<f64> = (0..k).map(|i| quantile((i as f64 + 0.5) / k as f64)).collect();
        Self::uniform(&values)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }
}

/// W₁ distance between two weighted empirical measures on ℝ, computed as
/// `∫ |F_a(x) - F_b(x)| dx` over the merged breakpoints (the quantile
/// coupling).
pub fn wasserstein1_1d(a: &Empirical1d, b: &Empirical1d) -> f64 {
    let (pa, pb) = (&a.points, &b.points);
    let (mut ia, mut ib) = (0, 0);
    let (mut fa, mut fb) = (0.0f64, 0.0f64);
    let mut acc = CompensatedSum::default();
    let mut prev: Option<f64> = None;
    while ia < pa.len() || ib < pb.len() {
        let next = match (pa.get(ia), pb.get(ib)) {
            (Some(x), Some(y)) => x.0.min(y.0),
            (Some(x), None) => x.0,
            (None, Some(y)) => y.0,
            (None, None) => unreachable!(),
        };
        if let Some(p) = prev {
            acc.add((fa - fb).abs() * (next - p));
        }
        while ia < pa.len() && pa[ia].0 == next {
            fa += pa[ia].1;
            ia += 1;
        }
        while ib < pb.len() && pb[ib].0 == next {
            fb += pb[ib].1;
            ib += 1;
        }
        prev = Some(next);
    }
    acc.total()
}

/// `(start, end, rate)` of a density supported on `[start, end]`.
pub type DensityOnInterval<'a> = (f64, f64, &'a dyn Fn(f64) -> f64);

/// Nonnegative measure on the grid nodes, `λ(dt) ≈ Σ_j λ_j δ_{t_j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Multiplier {
    atoms: Vec<f64>,
}

impl Multiplier {
    pub fn new(atoms: Vec<f64>) -> Result<Self> {
        if atoms.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::InvalidInput("multiplier atoms must be finite and nonnegative".into()));
        }
        Ok(Self { atoms })
    }

    pub fn zeros(len: usize) -> Self {
        Self { atoms: vec![0.0; len] }
    }

    /// Project arbitrary reals onto the nonnegative cone.
    pub fn projected(values: &[f64]) -> Self {
        Self { atoms: values.iter().map(|v| v.max(0.0)).collect() }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Total mass `λ(𝒯)`.
    pub fn mass(&self) -> f64 {
        numeric::compensated_sum(self.atoms.iter().copied())
    }

    /// `(t_j, λ_j)` pairs for the nonzero atoms.
    pub fn support(&self, grid: &TimeGrid) -> Vec<(f64, f64)> {
        grid.nodes()
            .iter()
            .zip(&self.atoms)
            .filter(|(_, a)| **a > 0.0)
            .map(|(t, a)| (*t, *a))
            .collect()
    }

    /// Discretize a measure made of point masses plus a density on an
    /// interval. Every component is spread onto nodes with the piecewise
    /// linear hat basis, so an atom at a node stays on that node and a smooth
    /// density `ρ` becomes `λ_j ≈ ρ(t_j) · Δt_j` (trapezoidal weights).
    pub fn discretize(
        grid: &TimeGrid,
        atoms: &[(f64, f64)],
        density: Option<DensityOnInterval<'_>>,
    ) -> Result<Self> {
        let nodes = grid.nodes();
        let m = grid.steps();
        let mut out = vec![0.0; m + 1];
        for &(t, mass) in atoms {
            if !(0.0..=grid.horizon()).contains(&t) {
                return Err(Error::InvalidInput(format!("atom at t={t} outside the grid")));
            }
            let j = grid.first_at_or_after(t).min(m);
            if (nodes[j] - t).abs() <= 1e-12 || j == 0 {
                out[j] += mass;
            } else {
                let theta = (t - nodes[j - 1]) / grid.dt(j - 1);
                out[j - 1] += (1.0 - theta) * mass;
                out[j] += theta * mass;
            }
        }
        if let Some((a, b, rho)) = density {
            let (gx, gw) = gauss_legendre(8);
            for k in 0..m {
                let lo = nodes[k].max(a);
                let hi = nodes[k + 1].min(b);
                if hi <= lo {
                    continue;
                }
                let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
                for (x, w) in gx.iter().zip(&gw) {
                    let t = mid + half * x;
                    let theta = (t - nodes[k]) / grid.dt(k);
                    let v = w * half * rho(t);
                    out[k] += (1.0 - theta) * v;
                    out[k + 1] += theta * v;
                }
            }
        }
        Self::new(out)
    }
}

impl TryFrom<Vec<f64>> for Multiplier {
    type Error = Error;
    fn try_from(atoms: Vec<f64>) -> Result<Self> {
        Self::new(atoms)
    }
}

impl From<Multiplier> for Vec<f64> {
    fn from(m: Multiplier) -> Self {
        m.atoms
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn grid_validation() {
        assert!(TimeGrid::new(vec![0.0, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.1, 0.5, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5]).is_err());
        let g = TimeGrid::uniform(1.0, 3).unwrap();
        assert_eq!(g.horizon(), 1.0);
        assert_eq!(g.steps(), 3);
        let w = g.trapezoid_weights();
        assert!(close(w.iter().sum::<f64>(), 1.0, 1e-15));
    }

    #[test]
    fn tilt_identity_and_ratio() {
        let m = WeightedMeasure::tilt(&[0.0; 4]).unwrap();
        assert_eq!(m.weights(), &[0.25; 4]);
        assert!(close(m.log_normalizer(), 0.0, 1e-15));

        let m = WeightedMeasure::tilt(&[1f64.ln(), 3f64.ln()]).unwrap();
        assert!(close(m.weights()[0], 0.75, 1e-15));
        assert!(close(m.weights()[1], 0.25, 1e-15));
    }

    #[test]
    fn tilt_shift_lowers_log_normalizer() {
        let v = [0.3, -1.2, 2.0, 0.0];
        let a = WeightedMeasure::tilt(&v).unwrap();
        let b = WeightedMeasure::tilt(&v.map(|x| x + 5.0)).unwrap();
        for (x, y) in a.weights().iter().zip(b.weights()) {
            assert!(close(*x, *y, 1e-15));
        }
        assert!(close(b.log_normalizer(), a.log_normalizer() - 5.0, 1e-12));
    }

    #[test]
    fn tilt_rejects_degenerate_potentials() {
        assert!(matches!(WeightedMeasure::tilt(&[f64::INFINITY; 3]), Err(Error::DegenerateTilt)));
        assert!(WeightedMeasure::tilt(&[0.0, f64::NAN]).is_err());
        let m = WeightedMeasure::tilt(&[0.0, f64::INFINITY]).unwrap();
        assert_eq!(m.weights(), &[1.0, 0.0]);
    }

    #[test]
    fn tilt_survives_huge_potentials() {
        let m = WeightedMeasure::tilt(&[-2000.0, -2000.0 + 2f64.ln()]).unwrap();
        assert!(close(m.weights()[0], 2.0 / 3.0, 1e-12));
        assert!(m.log_normalizer().is_finite());
    }

    #[test]
    fn entropy_examples() {
        assert!(close(WeightedMeasure::uniform(7).relative_entropy(), 0.0, 1e-15));
        let dirac = WeightedMeasure::from_weights(vec![1.0, 0.0]).unwrap();
        assert!(close(dirac.relative_entropy(), 2f64.ln(), 1e-15));
    }

    #[test]
    fn marginal_moment_examples() {
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let ens = PathEnsemble::new(grid, 3, 1, vec![2.0; 9]).unwrap();
        let mu = WeightedMeasure::uniform(3);
        assert!(close(time_marginal_moment(&ens, &mu, |_| 1.0, 1).unwrap(), 1.0, 1e-15));
        assert!(close(time_marginal_moment(&ens, &mu, |x| x[0], 2).unwrap(), 2.0, 1e-15));
        assert!(matches!(
            time_marginal_moment(&ens, &mu, |x| x[0], 3),
            Err(Error::NodeOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn w1_examples() {
        let a = Empirical1d::uniform(&[0.3, 1.0, -2.0]).unwrap();
        assert!(close(wasserstein1_1d(&a, &a), 0.0, 1e-15));
        let d0 = Empirical1d::uniform(&[0.0]).unwrap();
        let d1 = Empirical1d::uniform(&[1.0]).unwrap();
        assert!(close(wasserstein1_1d(&d0, &d1), 1.0, 1e-15));
        // Quantile coupling by hand: 0→0, 1→2, cost ½·0 + ½·1.
        let u01 = Empirical1d::uniform(&[0.0, 1.0]).unwrap();
        let u02 = Empirical1d::uniform(&[0.0, 2.0]).unwrap();
        assert!(close(wasserstein1_1d(&u01, &u02), 0.5, 1e-15));
        assert!(Empirical1d::uniform(&[]).is_err());
    }

    #[test]
    fn discretize_preserves_mass_and_places_atoms() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let rho = |_t: f64| 1.0;
        let m = Multiplier::discretize(&grid, &[(1.0, 1.0), (0.0, 0.5)], Some((0.35, 1.0, &rho)))
            .unwrap();
        assert!(close(m.mass(), 1.5 + 0.65, 1e-12));
        assert!(close(m.atoms()[0], 0.5, 1e-15));
        // Interior node fully inside the density support carries Δt.
        assert!(close(m.atoms()[6], 0.1, 1e-12));
        // Terminal node: atom plus half a cell of density.
        assert!(close(m.atoms()[10], 1.05, 1e-12));
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let grid = TimeGrid::uniform(2.0, 3).unwrap();
        let states: Vec<f64> = (0..16).map(|v| v as f64 * 0.37 - 1.0).collect();
        let ens = PathEnsemble::new(grid, 2, 2, states).unwrap();
        let mut buf = Vec::new();
        ens.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 * (3 + 4 + 16));
        assert_eq!(PathEnsemble::read_binary(&buf[..]).unwrap(), ens);
        let mut csv = Vec::new();
        ens.write_csv(&mut csv).unwrap();
        assert_eq!(PathEnsemble::read_csv(&csv[..]).unwrap(), ens);
    }

    #[test]
    fn multiplier_json_is_an_array() {
        let m = Multiplier::new(vec![0.0, 0.25]).unwrap();
        assert_eq!(serde_json::to_string(&m).unwrap(), "[0.0,0.25]");
        assert!(serde_json::from_str::<Multiplier>("[-1.0]").is_err());
    }

    proptest! {
        #[test]
        fn tilt_is_shift_invariant(v in prop::collection::vec(-30.0..30.0f64, 1..40), c in -1e3..1e3f64) {
            let a = WeightedMeasure::tilt(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = WeightedMeasure::tilt(&shifted).unwrap();
            for (x, y) in a.weights().iter().zip(b.weights()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert!((a.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn entropy_nonneg_and_zero_only_at_uniform(w in prop::collection::vec(0.0..1.0f64, 2..30)) {
            prop_assume!(w.iter().sum::<f64>() > 1e-6);
            let m = WeightedMeasure::from_weights(w.clone()).unwrap();
            let h = m.relative_entropy();
            prop_assert!(h >= 0.0);
            let n = w.len() as f64;
            let spread = m.weights().iter().map(|x| (x - 1.0 / n).abs()).fold(0.0, f64::max);
            if h <= 1e-14 {
                prop_assert!(spread <= 1e-6);
            }
        }

        #[test]
        fn marginal_moment_is_linear(
            vals in prop::collection::vec(-5.0..5.0f64, 9),
            w in prop::collection::vec(0.01..1.0f64, 3),
            a in -2.0..2.0f64, b in -2.0..2.0f64,
        ) {
            let grid = TimeGrid::uniform(1.0, 2).unwrap();
            let ens = PathEnsemble::new(grid, 3, 1, vals).unwrap();
            let mu = WeightedMeasure::from_weights(w).unwrap();
            let f = |x: &[f64]| x[0].sin();
            let g = |x: &[f64]| x[0] * x[0];
            for j in 0..3 {
                let lhs = time_marginal_moment(&ens, &mu, |x| a * f(x) + b * g(x), j).unwrap();
                let rhs = a * time_marginal_moment(&ens, &mu, f, j).unwrap()
                    + b * time_marginal_moment(&ens, &mu, g, j).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-12);
            }
        }

        #[test]
        fn w1_is_a_metric_on_triples(
            a in prop::collection::vec(-3.0..3.0f64, 1..12),
            b in prop::collection::vec(-3.0..3.0f64, 1..12),
            c in prop::collection::vec(-3.0..3.0f64, 1..12),
        ) {
            let (ea, eb, ec) = (
                Empirical1d::uniform(&a).unwrap(),
                Empirical1d::uniform(&b).unwrap(),
                Empirical1d::uniform(&c).unwrap(),
            );
            let ab = wasserstein1_1d(&ea, &eb);
            prop_assert!((ab - wasserstein1_1d(&eb, &ea)).abs() <= 1e-10);
            prop_assert!(ab <= wasserstein1_1d(&ea, &ec) + wasserstein1_1d(&ec, &eb) + 1e-10);
        }
    }
}
