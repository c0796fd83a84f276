//! Reference diffusions: specification, path sampling, and simulation of
//! the corrected (tilted) diffusion.
//!
//! Two Gaussian families are built in and sampled with exact transitions:
//!
//! * drifted Brownian motion `dX = ṁ(t) dt + dB`,
//! * Ornstein–Uhlenbeck `dX = (1 - X) dt + dB`,
//!
//! both started from a Gaussian initial law. Anything else is a custom SDE
//! integrated by Euler–Maruyama with sub-stepping.

pub mod oracle;

use std::fmt;
use std::sync::Arc;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measure::{PathEnsemble, TimeGrid, WeightedMeasure};
use crate::numeric::{self, cholesky, forward_substitute};
use crate::rng::stream_rng;

/// `b(t, x)` written into the output slice (length d).
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `σ(t, x)` written row-major into the output slice (length d×d).
pub type DiffusionFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// Draws one initial state from the supplied generator.
pub type InitialSampler = Arc<dyn Fn(&mut dyn RngCore) -> Vec<f64> + Send + Sync>;
/// A real function of time.
pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// `m`, `ṁ`, `m̈` for the drifted Brownian family, given explicitly so the
/// closed forms never differentiate numerically.
#[derive(Clone)]
pub struct TimeProfile {
    pub value: TimeFn,
    pub rate: TimeFn,
    pub accel: TimeFn,
}

impl TimeProfile {
    pub fn new(value: TimeFn, rate: TimeFn, accel: TimeFn) -> Self {
        Self { value, rate, accel }
    }

    /// `m(t) = Σ_k c_k t^k`.
    pub fn polynomial(coeffs: &[f64]) -> Self {
        let c = coeffs.to_vec();
        let d1: Vec<f64> = c.iter().enumerate().skip(1).map(|(k, a)| k as f64 * a).collect();
        let d2: Vec<f64> = d1.iter().enumerate().skip(1).map(|(k, a)| k as f64 * a).collect();
        let horner = |c: Vec<f64>| -> TimeFn {
            Arc::new(move |t| c.iter().rev().fold(0.0, |acc, a| acc * t + a))
        };
        Self { value: horner(c), rate: horner(d1), accel: horner(d2) }
    }
}

impl fmt::Debug for TimeProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TimeProfile")
    }
}

/// Built-in reference families.
#[derive(Clone, Debug)]
pub enum Family {
    /// `dX = ṁ(t) dt + dB`.
    DriftedBm(TimeProfile),
    /// `dX = (1 - X) dt + dB`.
    Ou,
    /// User-supplied drift and diffusion.
    Custom,
}

/// Law of `X_0`.
#[derive(Clone)]
pub enum InitialLaw {
    /// `N(mean, cov)`, `cov` row-major d×d.
    Gaussian { mean: Vec<f64>, cov: Vec<f64> },
    Custom { dim: usize, sampler: InitialSampler },
}

impl InitialLaw {
    pub fn gaussian_1d(mean: f64, var: f64) -> Self {
        InitialLaw::Gaussian { mean: vec![mean], cov: vec![var] }
    }

    /// Point mass at `x`.
    pub fn dirac(x: Vec<f64>) -> Self {
        let d = x.len();
        InitialLaw::Gaussian { mean: x, cov: vec![0.0; d * d] }
    }

    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Custom { dim, .. } => *dim,
        }
    }

    /// Lower factor `L` with `LLᵀ = cov`, tolerating zero rows (Dirac
    /// components).
    fn gaussian_factor(cov: &[f64], d: usize) -> Result<Vec<f64>> {
        if cov.iter().all(|c| *c == 0.0) {
            return Ok(vec![0.0; d * d]);
        }
        if d == 1 {
            if cov[0] < 0.0 {
                return Err(Error::InvalidInput("initial variance must be nonnegative".into()));
            }
            return Ok(vec![cov[0].sqrt()]);
        }
        cholesky(cov, d)
            .ok_or_else(|| Error::InvalidInput("initial covariance is not positive definite".into()))
    }
}

impl fmt::Debug for InitialLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialLaw::Gaussian { mean, cov } => {
                f.debug_struct("Gaussian").field("mean", mean).field("cov", cov).finish()
            }
            InitialLaw::Custom { dim, .. } => f.debug_struct("Custom").field("dim", dim).finish(),
        }
    }
}

/// Reference SDE `dX = b(t,X) dt + σ(t,X) dB`, `X_0 ~ initial`.
///
/// `σ` is assumed bounded by the caller.
#[derive(Clone)]
pub struct SdeSpec {
    pub dim: usize,
    pub family: Family,
    pub drift: DriftFn,
    pub diffusion: DiffusionFn,
    pub initial: InitialLaw,
    pub lipschitz_hint: f64,
}

impl fmt::Debug for SdeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeSpec")
            .field("dim", &self.dim)
            .field("family", &self.family)
            .field("initial", &self.initial)
            .finish()
    }
}

fn unit_diffusion() -> DiffusionFn {
    Arc::new(|_, _, out| out[0] = 1.0)
}

impl SdeSpec {
    pub fn drifted_bm(x0_mean: f64, x0_var: f64, profile: TimeProfile) -> Self {
        let rate = profile.rate.clone();
        Self {
            dim: 1,
            family: Family::DriftedBm(profile),
            drift: Arc::new(move |t, _, out| out[0] = rate(t)),
            diffusion: unit_diffusion(),
            initial: InitialLaw::gaussian_1d(x0_mean, x0_var),
            lipschitz_hint: 0.0,
        }
    }

    pub fn ou(x0_mean: f64, x0_var: f64) -> Self {
        Self {
            dim: 1,
            family: Family::Ou,
            drift: Arc::new(|_, x, out| out[0] = 1.0 - x[0]),
            diffusion: unit_diffusion(),
            initial: InitialLaw::gaussian_1d(x0_mean, x0_var),
            lipschitz_hint: 1.0,
        }
    }

    pub fn custom(dim: usize, drift: DriftFn, diffusion: DiffusionFn, initial: InitialLaw) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(Error::InvalidInput(format!("state dimension must be 1 or 2, got {dim}")));
        }
        if initial.dim() != dim {
            return Err(Error::InvalidInput("initial law dimension mismatch".into()));
        }
        Ok(Self { dim, family: Family::Custom, drift, diffusion, initial, lipschitz_hint: f64::NAN })
    }

    pub fn with_initial(mut self, initial: InitialLaw) -> Self {
        self.initial = initial;
        self
    }

    /// Same coefficients integrated by Euler–Maruyama rather than exact
    /// transitions.
    pub fn as_custom(mut self) -> Self {
        self.family = Family::Custom;
        self
    }

    /// Mean and variance of `X_t` under the reference law, for the Gaussian
    /// families in one dimension.
    pub fn gaussian_moments(&self, t: f64) -> Option<(f64, f64)> {
        let (x0, v0) = match &self.initial {
            InitialLaw::Gaussian { mean, cov } if self.dim == 1 => (mean[0], cov[0]),
            _ => return None,
        };
        match &self.family {
            Family::DriftedBm(p) => Some((x0 + (p.value)(t), v0 + t)),
            Family::Ou => {
                let e = (-t).exp();
                Some((1.0 + (x0 - 1.0) * e, v0 * e * e + 0.5 * (1.0 - e * e)))
            }
            Family::Custom => None,
        }
    }

    /// `Cov(X_s, X_t)` under the reference law for the Gaussian families.
    pub fn gaussian_covariance(&self, s: f64, t: f64) -> Option<f64> {
        let v0 = match &self.initial {
            InitialLaw::Gaussian { cov, .. } if self.dim == 1 => cov[0],
            _ => return None,
        };
        let (lo, hi) = (s.min(t), s.max(t));
        match &self.family {
            Family::DriftedBm(_) => Some(v0 + lo),
            Family::Ou => Some(v0 * (-lo - hi).exp() + (-hi).exp() * lo.sinh()),
            Family::Custom => None,
        }
    }
}

/// Variance reduction applied to the standard normal innovations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceReduction {
    /// Independent streams per particle.
    #[default]
    None,
    /// Particles come in pairs with negated innovations.
    Antithetic,
    /// Antithetic pairs whose innovation matrix is then whitened so its
    /// empirical second moment is exactly the identity. Couples particles;
    /// requires a Gaussian initial law.
    MomentMatched,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingOptions {
    /// Euler–Maruyama sub-steps per grid interval.
    pub substeps: usize,
    pub variance_reduction: VarianceReduction,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self { substeps: 4, variance_reduction: VarianceReduction::None }
    }
}

/// `∇φ(t, x)` written into the output slice.
pub type GradPhi<'a> = &'a (dyn Fn(f64, &[f64], &mut [f64]) + Sync);

/// Number of standard normals one path consumes after its initial state.
fn innovations_per_path(spec: &SdeSpec, steps: usize, opts: &SamplingOptions) -> usize {
    let per_step = match spec.family {
        Family::DriftedBm(_) | Family::Ou => 1,
        Family::Custom => opts.substeps.max(1),
    };
    steps * per_step * spec.dim
}

/// Standard normal innovation rows, one per particle. The first `d`
/// entries of a row feed a Gaussian initial law.
fn innovation_matrix(
    n: usize,
    width: usize,
    seed: u64,
    reduction: VarianceReduction,
) -> Result<Vec<f64>> {
    let mut z = vec![0.0; n * width];
    match reduction {
        VarianceReduction::None => {
            z.par_chunks_mut(width).enumerate().for_each(|(i, row)| {
                let mut rng = stream_rng(seed, i as u64);
                for v in row.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
            });
        }
        VarianceReduction::Antithetic | VarianceReduction::MomentMatched => {
            z.par_chunks_mut(2 * width).enumerate().for_each(|(p, pair)| {
                let mut rng = stream_rng(seed, p as u64);
                let (a, b) = pair.split_at_mut(width.min(pair.len()));
                for v in a.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                for (u, v) in b.iter_mut().zip(a.iter()) {
                    *u = -v;
                }
            });
            if reduction == VarianceReduction::MomentMatched {
                whiten(&mut z, n, width)?;
            }
        }
    }
    Ok(z)
}

/// Rescale rows so `(1/n) Σ_i z_i z_iᵀ = I` exactly.
fn whiten(z: &mut [f64], n: usize, width: usize) -> Result<()> {
    if width > 512 {
        return Err(Error::InvalidInput(format!(
            "moment matching supports at most 512 innovations per path, got {width}"
        )));
    }
    if n <= width {
        return Err(Error::InvalidInput(format!(
            "moment matching needs more particles ({n}) than innovations per path ({width})"
        )));
    }
    let mut second = numeric::par_sum_vec(n, width * width, |i, acc| {
        let row = &z[i * width..(i + 1) * width];
        for a in 0..width {
            for b in 0..=a {
                acc[a * width + b].add(row[a] * row[b]);
            }
        }
    });
    for a in 0..width {
        for b in 0..=a {
            second[a * width + b] /= n as f64;
            second[b * width + a] = second[a * width + b];
        }
    }
    let l = cholesky(&second, width)
        .ok_or_else(|| Error::InvalidInput("innovation moment matrix is singular".into()))?;
    z.par_chunks_mut(width).for_each(|row| forward_substitute(&l, width, row));
    Ok(())
}

struct PathScheme<'a> {
    spec: &'a SdeSpec,
    nodes: &'a [f64],
    substeps: usize,
}

impl PathScheme<'_> {
    /// Integrate one path from `x0` using `innov`, writing `(M+1)·d` values.
    /// `correction` is `σσᵀ∇φ`, subtracted from the drift.
    fn run(&self, x0: &[f64], innov: &[f64], correction: Option<GradPhi<'_>>, out: &mut [f64]) -> Result<()> {
        let d = self.spec.dim;
        let nodes = self.nodes;
        out[..d].copy_from_slice(x0);
        let mut x = x0.to_vec();
        let mut b = vec![0.0; d];
        let mut sig = vec![0.0; d * d];
        let mut g = vec![0.0; d];
        let mut corr = vec![0.0; d];
        let mut k = 0;
        for j in 0..nodes.len() - 1 {
            let (t0, t1) = (nodes[j], nodes[j + 1]);
            let dt = t1 - t0;
            match &self.spec.family {
                Family::DriftedBm(_) | Family::Ou => {
                    // Exact Gaussian transition for the reference part; the
                    // correction is integrated along the step with the state
                    // frozen at the left node.
                    corr.iter_mut().for_each(|c| *c = 0.0);
                    if let Some(grad) = correction {
                        let h = dt / self.substeps as f64;
                        for s in 0..self.substeps {
                            let ts = t0 + (s as f64 + 0.5) * h;
                            grad(ts, &x, &mut g);
                            let kernel = match self.spec.family {
                                Family::Ou => (-(t1 - ts)).exp(),
                                _ => 1.0,
                            };
                            corr[0] += h * kernel * g[0];
                        }
                        if !corr[0].is_finite() {
                            return Err(Error::NonFiniteDrift { t: t0, x: x.clone() });
                        }
                    }
                    let z = innov[k];
                    k += 1;
                    x[0] = match &self.spec.family {
                        Family::DriftedBm(p) => x[0] + ((p.value)(t1) - (p.value)(t0)) + dt.sqrt() * z,
                        _ => {
                            let e = (-dt).exp();
                            1.0 + (x[0] - 1.0) * e + (0.5 * (1.0 - e * e)).sqrt() * z
                        }
                    } - corr[0];
                }
                Family::Custom => {
                    let h = dt / self.substeps as f64;
                    let sq = h.sqrt();
                    for s in 0..self.substeps {
                        let ts = t0 + s as f64 * h;
                        (self.spec.drift)(ts, &x, &mut b);
                        (self.spec.diffusion)(ts, &x, &mut sig);
                        if let Some(grad) = correction {
                            grad(ts, &x, &mut g);
                            for r in 0..d {
                                // (σσᵀ∇φ)_r
                                let mut a = 0.0;
                                for c in 0..d {
                                    let mut sst = 0.0;
                                    for q in 0..d {
                                        sst += sig[r * d + q] * sig[c * d + q];
                                    }
                                    a += sst * g[c];
                                }
                                b[r] -= a;
                            }
                        }
                        if b.iter().any(|v| !v.is_finite()) {
                            return Err(Error::NonFiniteDrift { t: ts, x: x.clone() });
                        }
                        let z = &innov[k..k + d];
                        k += d;
                        for r in 0..d {
                            let mut noise = 0.0;
                            for c in 0..d {
                                noise += sig[r * d + c] * z[c];
                            }
                            x[r] += b[r] * h + sq * noise;
                        }
                    }
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteDrift { t: t1, x: x.clone() });
            }
            out[(j + 1) * d..(j + 2) * d].copy_from_slice(&x);
        }
        Ok(())
    }
}

fn simulate(
    spec: &SdeSpec,
    initial: &InitialLaw,
    correction: Option<GradPhi<'_>>,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
    opts: &SamplingOptions,
) -> Result<PathEnsemble> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one path".into()));
    }
    if initial.dim() != spec.dim {
        return Err(Error::InvalidInput("initial law dimension mismatch".into()));
    }
    let d = spec.dim;
    let steps_width = innovations_per_path(spec, grid.steps(), opts);
    let gaussian_init = matches!(initial, InitialLaw::Gaussian { .. });
    if !gaussian_init && opts.variance_reduction != VarianceReduction::None {
        return Err(Error::InvalidInput("variance reduction needs a Gaussian initial law".into()));
    }
    let init_width = if gaussian_init { d } else { 0 };
    let width = init_width + steps_width;
    let innov = innovation_matrix(n, width, seed, opts.variance_reduction)?;
    let factor = match initial {
        InitialLaw::Gaussian { cov, .. } => InitialLaw::gaussian_factor(cov, d)?,
        InitialLaw::Custom { .. } => Vec::new(),
    };
    let scheme = PathScheme { spec, nodes: grid.nodes(), substeps: opts.substeps.max(1) };
    let stride = grid.len() * d;
    let mut states = vec![0.0; n * stride];
    states
        .par_chunks_mut(stride)
        .enumerate()
        .try_for_each(|(i, out)| -> Result<()> {
            let row = &innov[i * width..(i + 1) * width];
            let x0 = match initial {
                InitialLaw::Gaussian { mean, .. } => (0..d)
                    .map(|r| mean[r] + (0..d).map(|c| factor[r * d + c] * row[c]).sum::<f64>())
                    .collect::<Vec<f64>>(),
                InitialLaw::Custom { sampler, .. } => {
                    // Custom initial laws draw from a stream disjoint from the
                    // innovation streams.
                    let mut rng = stream_rng(seed ^ 0x5EED_1417_u64, i as u64);
                    sampler(&mut rng)
                }
            };
            scheme.run(&x0, &row[init_width..], correction, out)
        })?;
    PathEnsemble::new(grid.clone(), n, d, states)
}

/// Sample `n` reference paths on `grid`. Deterministic given `seed`.
pub fn sample_paths(
    spec: &SdeSpec,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
    opts: &SamplingOptions,
) -> Result<PathEnsemble> {
    simulate(spec, &spec.initial, None, grid, n, seed, opts)
}

/// Sample the corrected diffusion `dX = (b - σσᵀ∇φ) dt + σ dB` started from
/// `tilted_initial`.
///
/// Uses the same innovations as [`sample_paths`] for the same seed, so a
/// zero gradient with the reference initial law reproduces it bitwise.
pub fn corrected_sde_sample(
    spec: &SdeSpec,
    grad_phi: GradPhi<'_>,
    tilted_initial: &InitialLaw,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
    opts: &SamplingOptions,
) -> Result<PathEnsemble> {
    simulate(spec, tilted_initial, Some(grad_phi), grid, n, seed, opts)
}

/// Reference paths started from the fixed state `x` at `nodes[0]`, which may
/// be any time. Returns `n × len(nodes) × d` states, row-major by path.
///
/// Path `i` draws its innovations from stream `i` of `seed`, so two calls
/// with equal seeds and node lists share random numbers.
pub fn sample_from(
    spec: &SdeSpec,
    nodes: &[f64],
    x: &[f64],
    n: usize,
    seed: u64,
    opts: &SamplingOptions,
) -> Result<Vec<f64>> {
    if n == 0 || x.len() != spec.dim || nodes.is_empty() {
        return Err(Error::InvalidInput("sample_from needs n ≥ 1, dim-matched start, nodes".into()));
    }
    if nodes.windows(2).any(|w| w[1] <= w[0]) || nodes.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidInput("nodes must be finite and strictly increasing".into()));
    }
    let d = spec.dim;
    let width = innovations_per_path(spec, nodes.len() - 1, opts);
    let innov = innovation_matrix(n, width.max(1), seed, opts.variance_reduction)?;
    let scheme = PathScheme { spec, nodes, substeps: opts.substeps.max(1) };
    let stride = nodes.len() * d;
    let mut states = vec![0.0; n * stride];
    states.par_chunks_mut(stride).enumerate().try_for_each(|(i, out)| {
        scheme.run(x, &innov[i * width.max(1)..(i + 1) * width.max(1)], None, out)
    })?;
    Ok(states)
}

/// Per-node weighted mean of coordinate 0 and its standard error.
pub fn mean_curve(ensemble: &PathEnsemble, measure: &WeightedMeasure) -> Vec<(f64, f64)> {
    (0..ensemble.grid().len())
        .map(|j| measure.mean_and_se(&ensemble.marginal(j, 0)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(t: f64, m: usize) -> TimeGrid {
        TimeGrid::uniform(t, m).unwrap()
    }

    #[test]
    fn polynomial_profile_derivatives() {
        let p = TimeProfile::polynomial(&[0.0, 2.0, -0.5]);
        assert_eq!((p.value)(1.0), 1.5);
        assert_eq!((p.rate)(1.0), 1.0);
        assert_eq!((p.accel)(0.3), -1.0);
    }

    #[test]
    fn drifted_bm_terminal_mean() {
        let spec = SdeSpec::drifted_bm(0.0, 0.0, TimeProfile::polynomial(&[0.0, 1.0]));
        let n = 20_000;
        let ens = sample_paths(&spec, &grid(1.0, 10), n, 11, &SamplingOptions::default()).unwrap();
        let (mean, _) = WeightedMeasure::uniform(n).mean_and_se(&ens.marginal(10, 0));
        assert!((mean - 1.0).abs() <= 3.0 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn ou_mean_relaxes_to_one() {
        let x0 = -1.0;
        let spec = SdeSpec::ou(x0, 0.0);
        let n = 20_000;
        let ens = sample_paths(&spec, &grid(2.0, 8), n, 5, &SamplingOptions::default()).unwrap();
        let mu = WeightedMeasure::uniform(n);
        for j in [2, 5, 8] {
            let t = ens.grid().nodes()[j];
            let (mean, se) = mu.mean_and_se(&ens.marginal(j, 0));
            let expect = 1.0 + (x0 - 1.0) * (-t).exp();
            assert!((mean - expect).abs() <= 4.0 * se, "t={t} mean={mean} expect={expect}");
        }
    }

    #[test]
    fn zero_coefficients_give_constant_paths() {
        let spec = SdeSpec::custom(
            1,
            Arc::new(|_, _, out| out[0] = 0.0),
            Arc::new(|_, _, out| out[0] = 0.0),
            InitialLaw::dirac(vec![0.7]),
        )
        .unwrap();
        let ens = sample_paths(&spec, &grid(1.0, 5), 10, 1, &SamplingOptions::default()).unwrap();
        assert!(ens.states().iter().all(|v| *v == 0.7));
    }

    #[test]
    fn non_finite_drift_is_reported() {
        let spec = SdeSpec::custom(
            1,
            Arc::new(|t, _, out| out[0] = if t > 0.5 { f64::NAN } else { 0.0 }),
            Arc::new(|_, _, out| out[0] = 1.0),
            InitialLaw::dirac(vec![0.0]),
        )
        .unwrap();
        let err = sample_paths(&spec, &grid(1.0, 4), 4, 1, &SamplingOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteDrift { t, .. } if t > 0.5));
    }

    #[test]
    fn zero_gradient_reproduces_reference_bitwise() {
        let zero = |_: f64, _: &[f64], out: &mut [f64]| out.iter_mut().for_each(|v| *v = 0.0);
        let g = grid(1.0, 6);
        let opts = SamplingOptions::default();
        for spec in [
            SdeSpec::drifted_bm(0.2, 1.0, TimeProfile::polynomial(&[0.0, 1.0])),
            SdeSpec::ou(0.5, 2.0),
            SdeSpec::ou(0.5, 2.0).as_custom(),
        ] {
            let a = sample_paths(&spec, &g, 64, 9, &opts).unwrap();
            let b = corrected_sde_sample(&spec, &zero, &spec.initial, &g, 64, 9, &opts).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_thread_independent() {
        let spec = SdeSpec::ou(0.0, 1.0);
        let g = grid(1.0, 5);
        let opts = SamplingOptions::default();
        let a = sample_paths(&spec, &g, 5000, 3, &opts).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| sample_paths(&spec, &g, 5000, 3, &opts).unwrap());
        assert_eq!(a, b);
        let c = sample_paths(&spec, &g, 5000, 4, &opts).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn moment_matching_pins_first_two_moments() {
        let spec = SdeSpec::ou(0.5, 1.0);
        let g = grid(1.0, 5);
        let n = 2000;
        let opts = SamplingOptions { substeps: 1, variance_reduction: VarianceReduction::MomentMatched };
        let ens = sample_paths(&spec, &g, n, 2, &opts).unwrap();
        let mu = WeightedMeasure::uniform(n);
        for j in 0..g.len() {
            let t = g.nodes()[j];
            let (m, v) = spec.gaussian_moments(t).unwrap();
            let xs = ens.marginal(j, 0);
            let mean = mu.expectation(|i| xs[i]);
            let var = mu.expectation(|i| (xs[i] - m).powi(2));
            assert!((mean - m).abs() < 1e-12, "t={t}");
            assert!((var - v).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn euler_maruyama_two_dimensional() {
        // Independent coordinates: x drifts at +1, y has diffusion 2.
        let spec = SdeSpec::custom(
            2,
            Arc::new(|_, _, out| {
                out[0] = 1.0;
                out[1] = 0.0;
            }),
            Arc::new(|_, _, out| {
                out.copy_from_slice(&[1.0, 0.0, 0.0, 2.0]);
            }),
            InitialLaw::dirac(vec![0.0, 0.0]),
        )
        .unwrap();
        let n = 20_000;
        let ens = sample_paths(&spec, &grid(1.0, 4), n, 8, &SamplingOptions::default()).unwrap();
        let mu = WeightedMeasure::uniform(n);
        let (mx, sx) = mu.mean_and_se(&ens.marginal(4, 0));
        let ys = ens.marginal(4, 1);
        let vy = mu.expectation(|i| ys[i] * ys[i]);
        assert!((mx - 1.0).abs() < 4.0 * sx);
        assert!((vy - 4.0).abs() < 0.2);
    }
}
