//! Entropic projections of diffusion path laws under time-indexed
//! equality and inequality constraints.
//!
//! The crate computes the minimiser of `H(μ|ν) + F(μ)` over path measures
//! whose time marginals satisfy `Ψ(μ_t) ≤ 0` for every grid time, together
//! with its Lagrange multiplier measure, and cross-checks the result along
//! independent routes:
//!
//! * [`dual_solver`] maximises the Gibbs free energy over nonnegative
//!   multipliers on a particle approximation of the reference law;
//! * [`bridge`] solves the same problem exactly on a finite state space with
//!   prescribed endpoint marginals (constrained Schrödinger bridge);
//! * [`hjb`] evaluates the Feynman–Kac potential whose gradient corrects the
//!   reference drift, and [`reference`] simulates the corrected diffusion;
//! * [`reference::oracle`] gives closed forms for Gaussian reference laws.
//!
//! [`experiments`] and [`verify`] tie these together into reproducible
//! checks.

// `!(x > 0.0)` is how NaN inputs are rejected throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bridge;
pub mod constraints;
pub mod dual_solver;
pub mod error;
pub mod experiments;
pub mod hjb;
pub mod measure;
pub mod numeric;
pub mod reference;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
pub use measure::{
    time_marginal_moment, wasserstein1_1d, Empirical1d, Multiplier, PathEnsemble, TimeGrid,
    WeightedMeasure,
};
