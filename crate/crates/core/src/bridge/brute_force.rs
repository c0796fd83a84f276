//! Exhaustive path enumeration for small chains.
//!
//! Used as an independent oracle: marginals are summed path by path, and the
//! constrained minimizer is found by active-set Newton on the joint dual in
//! `(ζ₀, ζ_T, λ)`, then certified by evaluating `H(p|ν)` of the explicit path
//! law together with its constraint residuals.

use serde::Serialize;

use super::MarkovReference;
use crate::constraints::EndpointEquality;
use crate::error::{Error, Result};
use crate::measure::Multiplier;
use crate::numeric::{cholesky, cholesky_solve, log_sum_exp};

/// Largest path count accepted by the enumerators.
pub const MAX_PATHS: usize = 100_000;

/// All state sequences with their reference log-probabilities.
pub fn enumerate_paths(reference: &MarkovReference) -> Result<Vec<(Vec<usize>, f64)>> {
    let (s, m) = (reference.size(), reference.steps());
    let count = (s as f64).powi(m as i32 + 1);
    if count > MAX_PATHS as f64 {
        return Err(Error::InvalidInput(format!("{count} paths exceed the enumeration limit {MAX_PATHS}")));
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut path = vec![0usize; m + 1];
    loop {
        let mut lw = reference.init()[path[0]].ln();
        for j in 0..m {
            lw += reference.kernel(j)[path[j] * s + path[j + 1]].ln();
        }
        out.push((path.clone(), lw));
        let mut k = m + 1;
        loop {
            if k == 0 {
                return Ok(out);
            }
            k -= 1;
            path[k] += 1;
            if path[k] < s {
                break;
            }
            path[k] = 0;
        }
    }
}

fn tilted_log_weights(
    paths: &[(Vec<usize>, f64)],
    s: usize,
    zeta0: &[f64],
    zeta_t: &[f64],
    lambda: &[f64],
    psi: &[f64],
) -> Vec<f64> {
    paths
        .iter()
        .map(|(p, lw)| {
            let m = p.len() - 1;
            let mut v = lw - zeta0[p[0]] - zeta_t[p[m]];
            for (j, &x) in p.iter().enumerate() {
                if lambda[j] != 0.0 {
                    v -= lambda[j] * psi[j * s + x];
                }
            }
            v
        })
        .collect()
}

/// Time marginals and `log Z` by direct summation over every path.
pub fn enumerated_marginals(
    reference: &MarkovReference,
    zeta0: &[f64],
    zeta_t: &[f64],
    lambda: &Multiplier,
    psi_values: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let (s, m) = (reference.size(), reference.steps());
    let paths = enumerate_paths(reference)?;
    let lw = tilted_log_weights(&paths, s, zeta0, zeta_t, lambda.atoms(), psi_values);
    let log_z = log_sum_exp(&lw);
    if log_z == f64::NEG_INFINITY {
        return Err(Error::IncompatiblePotentials);
    }
    let mut marg = vec![0.0; (m + 1) * s];
    for ((p, _), l) in paths.iter().zip(&lw) {
        let w = (l - log_z).exp();
        for (j, &x) in p.iter().enumerate() {
            marg[j * s + x] += w;
        }
    }
    Ok((marg, log_z))
}

#[derive(Debug, Clone, Serialize)]
pub struct BruteForceSolution {
    /// `H(p|ν)` summed over all paths.
    pub value: f64,
    pub multiplier: Multiplier,
    pub max_violation: f64,
    pub max_slackness_residual: f64,
    pub endpoint_error: f64,
    pub newton_steps: usize,
}

/// Feature vector of a path: initial indicator (all states), terminal
/// indicator (states `1..S`, fixing the gauge `ζ_T[0] = 0`), then `ψ_j(x_j)`
/// for active nodes.
fn features(p: &[usize], s: usize, active: &[usize], psi: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    let m = p.len() - 1;
    out[p[0]] = 1.0;
    if p[m] > 0 {
        out[s + p[m] - 1] = 1.0;
    }
    for (k, &j) in active.iter().enumerate() {
        out[2 * s - 1 + k] = psi[j * s + p[j]];
    }
}

struct Joint<'a> {
    paths: &'a [(Vec<usize>, f64)],
    s: usize,
    m: usize,
    psi: &'a [f64],
    target: Vec<f64>,
}

impl Joint<'_> {
    fn unpack(&self, theta: &[f64], active: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let s = self.s;
        let z0 = theta[..s].to_vec();
        let mut zt = vec![0.0; s];
        zt[1..].copy_from_slice(&theta[s..2 * s - 1]);
        let mut lam = vec![0.0; self.m + 1];
        for (k, &j) in active.iter().enumerate() {
            lam[j] = theta[2 * s - 1 + k];
        }
        (z0, zt, lam)
    }

    /// Dual value, gradient and negated Hessian (feature covariance).
    fn eval(&self, theta: &[f64], active: &[usize], want_cov: bool) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = theta.len();
        let (z0, zt, lam) = self.unpack(theta, active);
        let lw = tilted_log_weights(self.paths, self.s, &z0, &zt, &lam, self.psi);
        let log_z = log_sum_exp(&lw);
        let mut mean = vec![0.0; n];
        let mut second = vec![0.0; if want_cov { n * n } else { 0 }];
        let mut phi = vec![0.0; n];
        for ((p, _), l) in self.paths.iter().zip(&lw) {
            let w = (l - log_z).exp();
            features(p, self.s, active, self.psi, &mut phi);
            for a in 0..n {
                mean[a] += w * phi[a];
                if want_cov && phi[a] != 0.0 {
                    for b in 0..n {
                        second[a * n + b] += w * phi[a] * phi[b];
                    }
                }
            }
        }
        // Targets for the multiplier features are zero.
        let b = |a: usize| self.target.get(a).copied().unwrap_or(0.0);
        let value = -log_z - (0..n).map(|a| theta[a] * b(a)).sum::<f64>();
        let grad: Vec<f64> = (0..n).map(|a| mean[a] - b(a)).collect();
        if want_cov {
            for a in 0..n {
                for b in 0..n {
                    second[a * n + b] -= mean[a] * mean[b];
                }
            }
        }
        (value, grad, second, mean)
    }

    /// Newton ascent with λ unconstrained on the active set.
    fn newton(&self, theta: &mut Vec<f64>, active: &[usize], steps: &mut usize) -> Result<()> {
        let n = theta.len();
        for _ in 0..200 {
            let (value, grad, mut cov, _) = self.eval(theta, active, true);
            if grad.iter().all(|g| g.abs() < 1e-14) {
                return Ok(());
            }
            for a in 0..n {
                cov[a * n + a] += 1e-15;
            }
            let l = cholesky(&cov, n).ok_or_else(|| Error::Precondition("singular feature covariance".into()))?;
            let mut d = grad.clone();
            cholesky_solve(&l, n, &mut d);
            let slope: f64 = d.iter().zip(&grad).map(|(a, b)| a * b).sum();
            let mut t = 1.0;
            loop {
                let trial: Vec<f64> = theta.iter().zip(&d).map(|(x, di)| x + t * di).collect();
                let (v, ..) = self.eval(&trial, active, false);
                if v >= value + 1e-4 * t * slope || t < 1e-12 {
                    *theta = trial;
                    break;
                }
                t *= 0.5;
            }
            *steps += 1;
            if slope < 1e-28 {
                return Ok(());
            }
        }
        Err(Error::NotConverged { iterations: 200, detail: "enumeration Newton".into() })
    }
}

/// Constrained minimizer of `H(·|ν)` over all path laws with the given
/// endpoint marginals and `E[ψ_j(X_j)] ≤ 0`.
pub fn primal_oracle(
    reference: &MarkovReference,
    targets: &EndpointEquality,
    psi_values: &[f64],
) -> Result<BruteForceSolution> {
    let (s, m) = (reference.size(), reference.steps());
    let paths = enumerate_paths(reference)?;
    let mut target = targets.initial().to_vec();
    target.extend_from_slice(&targets.terminal()[1..]);
    let joint = Joint { paths: &paths, s, m, psi: psi_values, target };

    let mut active: Vec<usize> = Vec::new();
    let mut theta = vec![0.0; 2 * s - 1];
    let mut steps = 0;
    for _ in 0..4 * (m + 2) {
        joint.newton(&mut theta, &active, &mut steps)?;
        let (_, _, lam) = joint.unpack(&theta, &active);
        // Drop the most negative multiplier, if any.
        if let Some((k, _)) = active
            .iter()
            .enumerate()
            .filter(|(_, &j)| lam[j] < 0.0)
            .min_by(|a, b| lam[*a.1].total_cmp(&lam[*b.1]))
        {
            active.remove(k);
            theta.remove(2 * s - 1 + k);
            continue;
        }
        let (z0, zt, _) = joint.unpack(&theta, &active);
        let lw = tilted_log_weights(&paths, s, &z0, &zt, &lam, psi_values);
        let log_z = log_sum_exp(&lw);
        let g: Vec<f64> = (0..=m)
            .map(|j| paths.iter().zip(&lw).map(|((p, _), l)| (l - log_z).exp() * psi_values[j * s + p[j]]).sum())
            .collect();
        let worst = (0..=m).filter(|j| !active.contains(j)).max_by(|a, b| g[*a].total_cmp(&g[*b]));
        match worst {
            Some(j) if g[j] > 1e-13 => {
                let pos = active.partition_point(|&a| a < j);
                active.insert(pos, j);
                theta.insert(2 * s - 1 + pos, 0.0);
            }
            _ => {
                let value: f64 = paths
                    .iter()
                    .zip(&lw)
                    .map(|((_, l0), l)| {
                        let lp = l - log_z;
                        lp.exp() * (lp - l0)
                    })
                    .sum();
                let mut marg0 = vec![0.0; s];
                let mut marg_t = vec![0.0; s];
                for ((p, _), l) in paths.iter().zip(&lw) {
                    let w = (l - log_z).exp();
                    marg0[p[0]] += w;
                    marg_t[p[m]] += w;
                }
                let tv = |a: &[f64], b: &[f64]| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
                return Ok(BruteForceSolution {
                    value,
                    max_violation: g.iter().copied().fold(0.0, f64::max),
                    max_slackness_residual: lam.iter().zip(&g).map(|(l, gj)| l.min(gj.abs())).fold(0.0, f64::max),
                    endpoint_error: tv(&marg0, targets.initial()).max(tv(&marg_t, targets.terminal())),
                    multiplier: Multiplier::new(lam)?,
                    newton_steps: steps,
                });
            }
        }
    }
    Err(Error::NotConverged { iterations: steps, detail: "active set cycling".into() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_is_a_probability() {
        let r = MarkovReference::gaussian_rw(3, -1.0, 1.0, 0.7, 2, vec![1.0, 2.0, 1.0]).unwrap();
        let paths = enumerate_paths(&r).unwrap();
        assert_eq!(paths.len(), 27);
        let total: f64 = paths.iter().map(|(_, l)| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn unconstrained_oracle_matches_target_product_when_independent() {
        // A kernel with identical rows makes X₀ and X_M independent, so the
        // bridge is the target product and H = KL(μ^ini|ν₀) + KL(μ^fin|ν_M).
        let row = [0.1, 0.2, 0.3, 0.4];
        let k: Vec<f64> = row.repeat(4);
        let r = MarkovReference::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.25; 4], vec![k.clone(), k.clone(), k]).unwrap();
        let a = vec![0.4, 0.3, 0.2, 0.1];
        let b = vec![0.25, 0.25, 0.25, 0.25];
        let t = EndpointEquality::new(a.clone(), b.clone()).unwrap();
        let psi = r.psi_values(|_| -1.0);
        let sol = primal_oracle(&r, &t, &psi).unwrap();
        let kl = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
        let expect = kl(&a, &[0.25; 4]) + kl(&b, &row);
        assert!((sol.value - expect).abs() < 1e-12, "{} vs {expect}", sol.value);
        assert_eq!(sol.multiplier.mass(), 0.0);
    }
}
