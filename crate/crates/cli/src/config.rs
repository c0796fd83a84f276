//! Run configuration: one declarative TOML or JSON file per run.

use std::path::{Path, PathBuf};

use entroproj::bridge::BridgeConfig;
use entroproj::constraints::LinearConstraint;
use entroproj::dual_solver::DualConfig;
use entroproj::experiments::Perturbation;
use entroproj::reference::{SamplingOptions, SdeSpec, TimeProfile, VarianceReduction};
use entroproj::TimeGrid;
use serde::{Deserialize, Serialize};

use crate::diagnostic::Diagnostic;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Overridden by `--output-dir`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub instance: Option<InstanceConfig>,
    #[serde(default)]
    pub constraint: ConstraintConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub solver: DualConfig,
    #[serde(default)]
    pub bridge: Option<BridgeInstanceConfig>,
    #[serde(default)]
    pub hjb: Option<HjbConfig>,
    #[serde(default)]
    pub condition: Option<ConditionConfig>,
    #[serde(default)]
    pub stability: Option<StabilityConfig>,
    #[serde(default)]
    pub weak_stability: Option<WeakStabilityConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyConfig {
    DriftedBm,
    Ou,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    pub family: FamilyConfig,
    pub x0_mean: f64,
    pub x0_var: f64,
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Polynomial coefficients of the drift integral `m(t)`, constant term
    /// first. Drifted Brownian motion only.
    #[serde(default)]
    pub drift: Vec<f64>,
}

fn default_steps() -> usize {
    50
}

impl InstanceConfig {
    pub fn spec(&self) -> SdeSpec {
        match self.family {
            FamilyConfig::DriftedBm => {
                SdeSpec::drifted_bm(self.x0_mean, self.x0_var, TimeProfile::polynomial(&self.drift))
            }
            FamilyConfig::Ou => SdeSpec::ou(self.x0_mean, self.x0_var),
        }
    }

    pub fn grid(&self) -> entroproj::Result<TimeGrid> {
        TimeGrid::uniform(self.horizon, self.steps)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintConfig {
    /// `ψ(x) = x - c`.
    LinearMean {
        #[serde(default)]
        c: f64,
    },
    /// `ψ(x) = Σ a_k x^k`.
    Polynomial { coeffs: Vec<f64> },
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig::LinearMean { c: 0.0 }
    }
}

impl ConstraintConfig {
    pub fn build(&self) -> LinearConstraint {
        match self {
            ConstraintConfig::LinearMean { c } => LinearConstraint::linear_mean(*c),
            ConstraintConfig::Polynomial { coeffs } => LinearConstraint::polynomial(coeffs),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ConstraintConfig::LinearMean { c } => x - c,
            ConstraintConfig::Polynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, a| acc * x + a),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub paths: usize,
    pub substeps: usize,
    pub variance_reduction: VarianceReduction,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { paths: 20_000, substeps: 4, variance_reduction: VarianceReduction::None }
    }
}

impl SamplingConfig {
    pub fn options(&self) -> SamplingOptions {
        SamplingOptions { substeps: self.substeps, variance_reduction: self.variance_reduction }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianProfileConfig {
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeInstanceConfig {
    pub states: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub step_var: f64,
    pub steps: usize,
    /// Reference initial weights; uniform when absent.
    #[serde(default)]
    pub init: Option<Vec<f64>>,
    pub initial: GaussianProfileConfig,
    pub terminal: GaussianProfileConfig,
    /// Applies the run's constraint at interior nodes only.
    #[serde(default = "yes")]
    pub interior_only: bool,
    #[serde(default)]
    pub solver: BridgeConfig,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbPoint {
    pub t: f64,
    pub x: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbConfig {
    pub points: Vec<HjbPoint>,
    #[serde(default = "default_mc")]
    pub mc_paths: usize,
    #[serde(default = "default_fd")]
    pub fd_step: f64,
    /// Node weights of the multiplier; the discretized Gaussian oracle when
    /// absent.
    #[serde(default)]
    pub multiplier: Option<Vec<f64>>,
}

fn default_mc() -> usize {
    10_000
}

fn default_fd() -> f64 {
    1e-2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionConfig {
    pub ns: Vec<usize>,
    #[serde(default = "default_accepted")]
    pub target_accepted: usize,
    #[serde(default)]
    pub eps: f64,
    #[serde(default = "default_max_blocks")]
    pub max_blocks: usize,
    #[serde(default = "default_batch")]
    pub batch_blocks: usize,
}

fn default_accepted() -> usize {
    1000
}

fn default_max_blocks() -> usize {
    5_000_000
}

fn default_batch() -> usize {
    4096
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakStabilityConfig {
    pub ks: Vec<usize>,
    pub perturbation: Perturbation,
}

fn invalid(field: &str, message: impl Into<String>) -> Diagnostic {
    Diagnostic::validation(message).with_field(field)
}

fn require_finite(field: &str, v: f64) -> Result<(), Diagnostic> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, "must be finite"))
    }
}

fn require_positive(field: &str, v: f64) -> Result<(), Diagnostic> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive, got {v}")))
    }
}

fn require_nonnegative(field: &str, v: f64) -> Result<(), Diagnostic> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be nonnegative, got {v}")))
    }
}

fn require_count(field: &str, v: usize) -> Result<(), Diagnostic> {
    if v > 0 {
        Ok(())
    } else {
        Err(invalid(field, "must be at least 1"))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Diagnostic> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Diagnostic::validation(format!("cannot read {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, is_json)
    }

    /// Both formats go through one JSON value tree so diagnostics carry the
    /// same field paths.
    pub fn parse(text: &str, is_json: bool) -> Result<Self, Diagnostic> {
        let value: serde_json::Value = if is_json {
            serde_json::from_str(text).map_err(|e| Diagnostic::validation(format!("malformed JSON: {e}")))?
        } else {
            let table: toml::Table =
                toml::from_str(text).map_err(|e| Diagnostic::validation(format!("malformed TOML: {e}")))?;
            serde_json::to_value(table).map_err(|e| Diagnostic::validation(e.to_string()))?
        };
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let d = Diagnostic::validation(e.into_inner().to_string());
            if path == "." {
                d
            } else {
                d.with_field(path)
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Diagnostic> {
        if let Some(i) = &self.instance {
            require_finite("instance.x0_mean", i.x0_mean)?;
            require_nonnegative("instance.x0_var", i.x0_var)?;
            require_positive("instance.horizon", i.horizon)?;
            require_count("instance.steps", i.steps)?;
            for (k, a) in i.drift.iter().enumerate() {
                require_finite(&format!("instance.drift[{k}]"), *a)?;
            }
            if i.family == FamilyConfig::Ou && !i.drift.is_empty() {
                return Err(invalid("instance.drift", "only drifted Brownian motion takes a drift profile"));
            }
        }
        match &self.constraint {
            ConstraintConfig::LinearMean { c } => require_finite("constraint.c", *c)?,
            ConstraintConfig::Polynomial { coeffs } => {
                if coeffs.is_empty() {
                    return Err(invalid("constraint.coeffs", "must not be empty"));
                }
                for (k, a) in coeffs.iter().enumerate() {
                    require_finite(&format!("constraint.coeffs[{k}]"), *a)?;
                }
            }
        }
        require_count("sampling.paths", self.sampling.paths)?;
        require_count("sampling.substeps", self.sampling.substeps)?;
        require_positive("solver.step_size", self.solver.step_size)?;
        require_count("solver.max_iters", self.solver.max_iters)?;
        require_positive("solver.grad_tol", self.solver.grad_tol)?;
        require_positive("solver.identity_tol", self.solver.identity_tol)?;
        if let Some(b) = &self.bridge {
            if b.states < 2 {
                return Err(invalid("bridge.states", "need at least 2 states"));
            }
            require_count("bridge.steps", b.steps)?;
            require_finite("bridge.x_min", b.x_min)?;
            require_finite("bridge.x_max", b.x_max)?;
            if b.x_max <= b.x_min {
                return Err(invalid("bridge.x_max", "must exceed bridge.x_min"));
            }
            require_positive("bridge.step_var", b.step_var)?;
            if let Some(init) = &b.init {
                if init.len() != b.states {
                    return Err(invalid("bridge.init", format!("expected {} weights, got {}", b.states, init.len())));
                }
                for (k, w) in init.iter().enumerate() {
                    require_nonnegative(&format!("bridge.init[{k}]"), *w)?;
                }
            }
            require_finite("bridge.initial.mean", b.initial.mean)?;
            require_positive("bridge.initial.var", b.initial.var)?;
            require_finite("bridge.terminal.mean", b.terminal.mean)?;
            require_positive("bridge.terminal.var", b.terminal.var)?;
            require_positive("bridge.solver.sinkhorn_tol", b.solver.sinkhorn_tol)?;
        }
        if let Some(h) = &self.hjb {
            if h.points.is_empty() {
                return Err(invalid("hjb.points", "must not be empty"));
            }
            for (k, p) in h.points.iter().enumerate() {
                require_nonnegative(&format!("hjb.points[{k}].t"), p.t)?;
                require_finite(&format!("hjb.points[{k}].x"), p.x)?;
            }
            require_count("hjb.mc_paths", h.mc_paths)?;
            require_positive("hjb.fd_step", h.fd_step)?;
            if let Some(m) = &h.multiplier {
                for (k, w) in m.iter().enumerate() {
                    require_nonnegative(&format!("hjb.multiplier[{k}]"), *w)?;
                }
            }
        }
        if let Some(c) = &self.condition {
            if c.ns.is_empty() {
                return Err(invalid("condition.ns", "must not be empty"));
            }
            for (k, n) in c.ns.iter().enumerate() {
                require_count(&format!("condition.ns[{k}]"), *n)?;
            }
            require_count("condition.target_accepted", c.target_accepted)?;
            require_finite("condition.eps", c.eps)?;
            require_count("condition.batch_blocks", c.batch_blocks)?;
            require_count("condition.max_blocks", c.max_blocks)?;
        }
        if let Some(s) = &self.stability {
            if s.eps.is_empty() {
                return Err(invalid("stability.eps", "must not be empty"));
            }
            for (k, e) in s.eps.iter().enumerate() {
                require_nonnegative(&format!("stability.eps[{k}]"), *e)?;
            }
        }
        if let Some(w) = &self.weak_stability {
            if w.ks.is_empty() {
                return Err(invalid("weak_stability.ks", "must not be empty"));
            }
            for (k, v) in w.ks.iter().enumerate() {
                require_count(&format!("weak_stability.ks[{k}]"), *v)?;
            }
        }
        Ok(())
    }

    pub fn instance(&self) -> Result<&InstanceConfig, Diagnostic> {
        self.instance.as_ref().ok_or_else(|| invalid("instance", "this command needs an [instance] block"))
    }

    pub fn block<'a, T>(&self, block: &'a Option<T>, name: &str) -> Result<&'a T, Diagnostic> {
        block.as_ref().ok_or_else(|| invalid(name, format!("this command needs a [{name}] block")))
    }
}
