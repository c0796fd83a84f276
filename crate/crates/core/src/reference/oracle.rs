//! Closed-form solutions of the mean constraint `E[X_t] ≤ 0` for all
//! `t ∈ [0, T]`, i.e. `ψ(x) = x`, for the two Gaussian reference families.
//!
//! For these families the optimal potential is affine in `x`,
//! `φ_t(x) = g(t) x + h(t)`, so the tilted law is Gaussian, keeps the
//! reference covariance, and is simulated by shifting the drift by `-g(t)`.

use std::sync::Arc;

use serde::Serialize;

use super::{Family, InitialLaw, SdeSpec, TimeFn};
use crate::error::{Error, Result};
use crate::measure::{Multiplier, TimeGrid};
use crate::numeric::{bisect, gauss_legendre};

const ROOT_TOL: f64 = 1e-12;

/// Which constraint regime the optimum is in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleCase {
    /// Only the terminal constraint binds.
    TerminalAtom,
    /// The constraint saturates from an interior activation time on.
    InteriorActivation,
    /// The initial mean is pushed to zero and the constraint binds throughout.
    InitialAtom,
}

impl OracleCase {
    pub fn number(self) -> u8 {
        match self {
            OracleCase::TerminalAtom => 1,
            OracleCase::InteriorActivation => 2,
            OracleCase::InitialAtom => 3,
        }
    }
}

/// Absolutely continuous part `ρ(t) dt` of the multiplier on `[start, end]`.
#[derive(Clone)]
pub struct DensityPart {
    pub start: f64,
    pub end: f64,
    pub rate: TimeFn,
}

/// Continuous-time optimal multiplier and potential gradient.
#[derive(Clone)]
pub struct OracleSolution {
    pub case: OracleCase,
    pub horizon: f64,
    /// Point masses `(t, mass)`.
    pub atoms: Vec<(f64, f64)>,
    pub density: Option<DensityPart>,
    /// `g(t) = ∂_x φ_t`, right-continuous at an initial atom.
    pub grad_phi: TimeFn,
    /// `g(0)` including any atom at zero.
    pub grad_phi_at_zero: f64,
    pub initial_mean: f64,
    pub initial_var: f64,
    /// `E_μ̄[X_t]`.
    pub mean_curve: TimeFn,
    pub activation_time: Option<f64>,
    /// Coefficient `β₁` in the affine drift `b = β₀(t) + β₁ x`.
    pub drift_slope: f64,
    /// `H(μ̄|ν)`.
    pub entropy: f64,
    pub notes: Vec<String>,
}

/// Serializable summary of an oracle evaluated on a grid.
#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub case: u8,
    pub activation_time: Option<f64>,
    pub atoms: Vec<(f64, f64)>,
    pub density_interval: Option<(f64, f64)>,
    pub initial_mean: f64,
    pub initial_var: f64,
    pub entropy: f64,
    pub grid: Vec<f64>,
    pub multiplier: Vec<f64>,
    pub mean_curve: Vec<f64>,
    pub grad_phi: Vec<f64>,
    pub notes: Vec<String>,
}

impl OracleSolution {
    /// Total mass of the continuous-time multiplier.
    pub fn mass(&self) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|a| a.1).sum();
        atoms + self.density.as_ref().map_or(0.0, |d| integrate(&*d.rate, d.start, d.end))
    }

    /// Multiplier spread onto `grid` with the hat basis.
    pub fn discretize(&self, grid: &TimeGrid) -> Result<Multiplier> {
        let dens = self.density.as_ref();
        Multiplier::discretize(
            grid,
            &self.atoms,
            dens.map(|d| (d.start, d.end, &*d.rate as &dyn Fn(f64) -> f64)),
        )
    }

    pub fn tilted_initial(&self) -> InitialLaw {
        InitialLaw::gaussian_1d(self.initial_mean, self.initial_var)
    }

    /// Drift correction callback for [`super::corrected_sde_sample`].
    pub fn grad_phi_callback(&self) -> impl Fn(f64, &[f64], &mut [f64]) + Sync + '_ {
        move |t, _x, out| out[0] = (self.grad_phi)(t)
    }

    /// `x`-coefficient of the HJB equation for `φ = g(t) x + h(t)`:
    /// `g' + β₁ g + ρ`, away from atoms. Uses a fourth-order central
    /// difference of `g`.
    pub fn hjb_affine_residual(&self, t: f64) -> f64 {
        let h = 1e-3;
        let g = &self.grad_phi;
        let dg = (-g(t + 2.0 * h) + 8.0 * g(t + h) - 8.0 * g(t - h) + g(t - 2.0 * h)) / (12.0 * h);
        let rho = self
            .density
            .as_ref()
            .filter(|d| t >= d.start && t <= d.end)
            .map_or(0.0, |d| (d.rate)(t));
        dg + self.drift_slope * g(t) + rho
    }

    pub fn report(&self, grid: &TimeGrid) -> Result<OracleReport> {
        let nodes = grid.nodes().to_vec();
        let mut grad: Vec<f64> = nodes.iter().map(|&t| (self.grad_phi)(t)).collect();
        grad[0] = self.grad_phi_at_zero;
        Ok(OracleReport {
            case: self.case.number(),
            activation_time: self.activation_time,
            atoms: self.atoms.clone(),
            density_interval: self.density.as_ref().map(|d| (d.start, d.end)),
            initial_mean: self.initial_mean,
            initial_var: self.initial_var,
            entropy: self.entropy,
            multiplier: self.discretize(grid)?.atoms().to_vec(),
            mean_curve: nodes.iter().map(|&t| (self.mean_curve)(t)).collect(),
            grad_phi: grad,
            grid: nodes,
            notes: self.notes.clone(),
        })
    }
}

/// Composite 8-point Gauss–Legendre on 64 panels.
fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let (x, w) = gauss_legendre(8);
    let panels = 64;
    let h = (b - a) / panels as f64;
    let mut s = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        for (xi, wi) in x.iter().zip(&w) {
            s += wi * 0.5 * h * f(mid + 0.5 * h * xi);
        }
    }
    s
}

/// `H(μ̄|ν)` by Girsanov: Gaussian shift of the initial law plus the
/// quadratic cost of the drift correction. Splits at `kink` if given.
fn girsanov_entropy(x0: f64, m0: f64, var0: f64, g: &dyn Fn(f64) -> f64, horizon: f64, kink: Option<f64>) -> f64 {
    let initial = if var0 > 0.0 { (x0 - m0).powi(2) / (2.0 * var0) } else { 0.0 };
    let sq = |t: f64| g(t) * g(t);
    let path = match kink {
        Some(k) if k > 0.0 && k < horizon => integrate(&sq, 0.0, k) + integrate(&sq, k, horizon),
        _ => integrate(&sq, 0.0, horizon),
    };
    initial + 0.5 * path
}

fn gaussian_initial(spec: &SdeSpec) -> Result<(f64, f64)> {
    match &spec.initial {
        InitialLaw::Gaussian { mean, cov } if spec.dim == 1 => {
            if !(cov[0] > 0.0) {
                return Err(Error::Precondition("initial variance must be positive".into()));
            }
            Ok((mean[0], cov[0]))
        }
        _ => Err(Error::Precondition("oracle needs a one-dimensional Gaussian initial law".into())),
    }
}

/// First `t` in `[lo, hi]` with `f(t) ≥ 0`, assuming `f(lo) < 0 ≤ f(hi)`.
fn first_nonnegative(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let sign = |t: f64| if f(t) >= 0.0 { 1.0 } else { -1.0 };
    bisect(sign, lo, hi, ROOT_TOL).unwrap_or(hi)
}

/// Oracle for `dX = ṁ dt + dB`, `X_0 ~ N(x0, σ²)`, `m(0) = 0`, `m` nondecreasing
/// and concave.
pub fn gaussian_oracle_drifted_bm(spec: &SdeSpec, horizon: f64) -> Result<OracleSolution> {
    let profile = match &spec.family {
        Family::DriftedBm(p) => p.clone(),
        _ => return Err(Error::Precondition("drifted Brownian oracle needs the drifted Brownian family".into())),
    };
    let (x0, s2) = gaussian_initial(spec)?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidInput("horizon must be positive".into()));
    }
    let (m, md, mdd) = (profile.value.clone(), profile.rate.clone(), profile.accel.clone());
    if m(0.0).abs() > 1e-12 {
        return Err(Error::Precondition("profile must satisfy m(0) = 0".into()));
    }
    for k in 0..=1000 {
        let t = horizon * k as f64 / 1000.0;
        if md(t) < -1e-12 {
            return Err(Error::Precondition(format!("profile must be nondecreasing (ṁ({t}) < 0)")));
        }
        if mdd(t) > 1e-12 {
            return Err(Error::Precondition(format!("profile must be concave (m̈({t}) > 0)")));
        }
    }
    if !(x0 + m(horizon) > 0.0) {
        return Err(Error::Precondition("need x0 + m(T) > 0 for a feasible constraint".into()));
    }
    let mbar = {
        let (m, md) = (m.clone(), md.clone());
        move |t: f64| x0 + m(t) - (s2 + t) * md(t)
    };
    let neg_accel: TimeFn = {
        let mdd = mdd.clone();
        Arc::new(move |t| -mdd(t))
    };
    let mut notes = Vec::new();

    let sol = if mbar(horizon) < 0.0 {
        let a = (x0 + m(horizon)) / (s2 + horizon);
        let start = x0 - s2 * a;
        let mc = m.clone();
        notes.push(format!("terminal atom a = {a}; initial mean x0 - σ²a"));
        OracleSolution {
            case: OracleCase::TerminalAtom,
            horizon,
            atoms: vec![(horizon, a)],
            density: None,
            grad_phi: Arc::new(move |_| a),
            grad_phi_at_zero: a,
            initial_mean: start,
            initial_var: s2,
            mean_curve: Arc::new(move |t| start + mc(t) - a * t),
            activation_time: None,
            drift_slope: 0.0,
            entropy: girsanov_entropy(x0, start, s2, &|_| a, horizon, None),
            notes,
        }
    } else if mbar(0.0) <= 0.0 {
        let tau = if mbar(0.0) == 0.0 { 0.0 } else { first_nonnegative(&mbar, 0.0, horizon) };
        let slope = md(tau);
        let start = x0 - s2 * slope;
        let (mc, mdc) = (m.clone(), md.clone());
        let g: TimeFn = Arc::new(move |t| mdc(t.max(tau)));
        let mut atoms = Vec::new();
        if md(horizon) > 0.0 {
            atoms.push((horizon, md(horizon)));
        }
        notes.push(format!("activation time τ̄ = {tau}"));
        let gg = g.clone();
        OracleSolution {
            case: OracleCase::InteriorActivation,
            horizon,
            atoms,
            density: Some(DensityPart { start: tau, end: horizon, rate: neg_accel }),
            grad_phi: g,
            grad_phi_at_zero: slope,
            initial_mean: start,
            initial_var: s2,
            mean_curve: Arc::new(move |t| if t <= tau { start + mc(t) - slope * t } else { 0.0 }),
            activation_time: Some(tau),
            drift_slope: 0.0,
            entropy: girsanov_entropy(x0, start, s2, &*gg, horizon, Some(tau)),
            notes,
        }
    } else {
        let atom0 = (x0 - s2 * md(0.0)) / s2;
        let mut atoms = vec![(0.0, atom0)];
        if md(horizon) > 0.0 {
            atoms.push((horizon, md(horizon)));
        }
        let mdc = md.clone();
        let g: TimeFn = Arc::new(move |t| mdc(t));
        let gg = g.clone();
        notes.push("initial law pushed to N(0, σ²); constraint binds on all of [0, T]".into());
        OracleSolution {
            case: OracleCase::InitialAtom,
            horizon,
            atoms,
            density: Some(DensityPart { start: 0.0, end: horizon, rate: neg_accel }),
            grad_phi: g,
            grad_phi_at_zero: x0 / s2,
            initial_mean: 0.0,
            initial_var: s2,
            mean_curve: Arc::new(|_| 0.0),
            activation_time: Some(0.0),
            drift_slope: 0.0,
            entropy: girsanov_entropy(x0, 0.0, s2, &*gg, horizon, None),
            notes,
        }
    };
    Ok(sol)
}

/// `E[X_t]` under the OU law tilted by a terminal atom of mass `lam` at `tau`,
/// valid for `t ≤ tau`.
fn ou_tilted_mean(x0: f64, s2: f64, tau: f64, lam: f64, t: f64) -> f64 {
    let c = lam * (-tau).exp();
    1.0 + (x0 - 1.0 - s2 * c) * (-t).exp() - c * t.sinh()
}

/// Oracle for `dX = (1 - X) dt + dB`, `X_0 ~ N(x0, σ²)`.
pub fn gaussian_oracle_ou(spec: &SdeSpec, horizon: f64) -> Result<OracleSolution> {
    if !matches!(spec.family, Family::Ou) {
        return Err(Error::Precondition("OU oracle needs the OU family".into()));
    }
    let (x0, s2) = gaussian_initial(spec)?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidInput("horizon must be positive".into()));
    }
    if !(1.0 + (x0 - 1.0) * (-horizon).exp() > 0.0) {
        return Err(Error::Precondition("need 1 + (x0 - 1)e^{-T} > 0 for a feasible constraint".into()));
    }
    let mut notes = Vec::new();

    if x0 > s2 {
        let g: TimeFn = Arc::new(|_| 1.0);
        notes.push(
            "interior density is +1 dt: forced by g' = g - ρ with g ≡ 1; initial law pushed to N(0, σ²)".into(),
        );
        return Ok(OracleSolution {
            case: OracleCase::InitialAtom,
            horizon,
            atoms: vec![(0.0, (x0 - s2) / s2), (horizon, 1.0)],
            density: Some(DensityPart { start: 0.0, end: horizon, rate: Arc::new(|_| 1.0) }),
            grad_phi: g.clone(),
            grad_phi_at_zero: x0 / s2,
            initial_mean: 0.0,
            initial_var: s2,
            mean_curve: Arc::new(|_| 0.0),
            activation_time: Some(0.0),
            drift_slope: -1.0,
            entropy: girsanov_entropy(x0, 0.0, s2, &*g, horizon, None),
            notes,
        });
    }

    // τ̄ is the first zero of the mean at the tilt time for a unit atom.
    let f = move |tau: f64| ou_tilted_mean(x0, s2, tau, 1.0, tau);
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::NotConverged { iterations: 0, detail: "activation time bracket".into() });
        }
    }
    let tau = if f(0.0) >= 0.0 { 0.0 } else { first_nonnegative(&f, 0.0, hi) };

    if horizon < tau {
        let e = (-horizon).exp();
        let lam = (1.0 + (x0 - 1.0) * e) / (s2 * e * e + e * horizon.sinh());
        let start = x0 - lam * s2 * e;
        let g: TimeFn = Arc::new(move |t| lam * (t - horizon).exp());
        notes.push(format!("activation time τ̄ = {tau} exceeds T; terminal atom λ_T = {lam}"));
        let gg = g.clone();
        Ok(OracleSolution {
            case: OracleCase::TerminalAtom,
            horizon,
            atoms: vec![(horizon, lam)],
            density: None,
            grad_phi: g,
            grad_phi_at_zero: lam * e,
            initial_mean: start,
            initial_var: s2,
            mean_curve: Arc::new(move |t| ou_tilted_mean(x0, s2, horizon, lam, t)),
            activation_time: None,
            drift_slope: -1.0,
            entropy: girsanov_entropy(x0, start, s2, &*gg, horizon, None),
            notes,
        })
    } else {
        let start = x0 - s2 * (-tau).exp();
        let g: TimeFn = Arc::new(move |t| if t <= tau { (t - tau).exp() } else { 1.0 });
        notes.push(format!("activation time τ̄ = {tau}"));
        let gg = g.clone();
        Ok(OracleSolution {
            case: OracleCase::InteriorActivation,
            horizon,
            atoms: vec![(horizon, 1.0)],
            density: Some(DensityPart { start: tau, end: horizon, rate: Arc::new(|_| 1.0) }),
            grad_phi: g,
            grad_phi_at_zero: (-tau).exp(),
            initial_mean: start,
            initial_var: s2,
            mean_curve: Arc::new(move |t| if t <= tau { ou_tilted_mean(x0, s2, tau, 1.0, t) } else { 0.0 }),
            activation_time: Some(tau),
            drift_slope: -1.0,
            entropy: girsanov_entropy(x0, start, s2, &*gg, horizon, Some(tau)),
            notes,
        })
    }
}

/// Dispatch on the family.
pub fn gaussian_oracle(spec: &SdeSpec, horizon: f64) -> Result<OracleSolution> {
    match spec.family {
        Family::DriftedBm(_) => gaussian_oracle_drifted_bm(spec, horizon),
        Family::Ou => gaussian_oracle_ou(spec, horizon),
        Family::Custom => Err(Error::Precondition("no closed form for a custom SDE".into())),
    }
}
