//! Experiment configuration files (TOML) and their translation into a solved
//! problem instance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::exponent::{ExponentField, ExponentSpec, Flux, WeightField, WeightSpec};
use crate::geometry::Point;
use crate::grid::{build_grid, DomainKind, Grid, NodeFlag};
use crate::harness::{alpha_bound, FunctionSpec, Instance, Variant};
use crate::measure::{Atom, DensitySpec, MeasureData};
use crate::solver::{LoadRule, Relaxation, SolverOptions};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: String,
    pub domain: DomainBlock,
    pub exponent: ExponentBlock,
    #[serde(default)]
    pub flux: FluxBlock,
    #[serde(default)]
    pub measure: MeasureBlock,
    #[serde(default)]
    pub obstacles: ObstacleBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub harness: HarnessBlock,
    #[serde(default)]
    pub chain: ChainBlock,
    #[serde(default)]
    pub sweep: SweepBlock,
}

fn default_output() -> String {
    "out".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBlock {
    pub kind: String,
    pub resolution: usize,
}

/// Exponent function plus optional declared bounds, which must match the
/// computed range.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExponentBlock {
    #[serde(default)]
    pub p_minus: Option<f64>,
    #[serde(default)]
    pub p_plus: Option<f64>,
    #[serde(flatten)]
    pub spec: ExponentSpec,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluxBlock {
    #[serde(default)]
    pub weight: WeightSpec,
    pub eps_reg: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureBlock {
    #[serde(default)]
    pub atoms: Vec<Atom>,
    pub density: Option<DensitySpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleBlock {
    pub lower: FunctionSpec,
    pub upper: FunctionSpec,
    pub boundary: FunctionSpec,
}

impl Default for ObstacleBlock {
    fn default() -> Self {
        ObstacleBlock {
            lower: FunctionSpec::Constant { value: -1e6 },
            upper: FunctionSpec::Constant { value: 1e6 },
            boundary: FunctionSpec::Constant { value: 0.0 },
        }
    }
}

/// `"auto"` or a fixed factor in `(0, 2)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RelaxationSetting {
    Factor(f64),
    Named(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_sweeps")]
    pub max_sweeps: usize,
    #[serde(default = "default_relaxation")]
    pub relaxation: RelaxationSetting,
    /// `"nearest"` or `"hat"`.
    #[serde(default = "default_load_rule")]
    pub load_rule: String,
}

fn default_tol() -> f64 {
    1e-9
}
fn default_sweeps() -> usize {
    100_000
}
fn default_relaxation() -> RelaxationSetting {
    RelaxationSetting::Named("auto".into())
}
fn default_load_rule() -> String {
    "nearest".into()
}

impl Default for SolverBlock {
    fn default() -> Self {
        SolverBlock {
            tol: default_tol(),
            max_sweeps: default_sweeps(),
            relaxation: default_relaxation(),
            load_rule: default_load_rule(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessBlock {
    #[serde(default = "default_q")]
    pub q: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: Vec<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_level_ratio")]
    pub level_ratio: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub mollify: Vec<usize>,
    #[serde(default)]
    pub test_exponents: Vec<ExponentSpec>,
    #[serde(default = "default_tau0")]
    pub tau0: f64,
    #[serde(default = "default_big_r")]
    pub big_r: f64,
    /// Overrides the derived `R_0` for the level-set study.
    pub r0: Option<f64>,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
}

fn default_q() -> Vec<f64> {
    vec![0.5, 1.0, 1.5]
}
fn default_alpha() -> Vec<f64> {
    vec![0.25]
}
fn default_epsilon() -> f64 {
    0.5
}
fn default_level_ratio() -> f64 {
    2.0
}
fn default_delta() -> f64 {
    0.1
}
fn default_tau0() -> f64 {
    0.1
}
fn default_big_r() -> f64 {
    0.5
}
fn default_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

impl Default for HarnessBlock {
    fn default() -> Self {
        HarnessBlock {
            q: default_q(),
            alpha: default_alpha(),
            epsilon: default_epsilon(),
            level_ratio: default_level_ratio(),
            delta: default_delta(),
            mollify: Vec::new(),
            test_exponents: Vec::new(),
            tau0: default_tau0(),
            big_r: default_big_r(),
            r0: None,
            variants: default_variants(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainBlock {
    /// Boundary nodes used as window centers.
    #[serde(default)]
    pub centers: Vec<Point>,
    /// Comparison radii `r`; the outer window is `Omega_{8r}`.
    #[serde(default)]
    pub radii: Vec<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Reverse Hoelder radius as a multiple of `r`.
    #[serde(default = "default_rho_factor")]
    pub rho_factor: f64,
}

fn default_sigma() -> f64 {
    0.05
}
fn default_beta() -> f64 {
    0.5
}
fn default_rho_factor() -> f64 {
    2.0
}

impl Default for ChainBlock {
    fn default() -> Self {
        ChainBlock {
            centers: Vec::new(),
            radii: Vec::new(),
            sigma: default_sigma(),
            beta: default_beta(),
            rho_factor: default_rho_factor(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    #[serde(default)]
    pub resolutions: Vec<usize>,
}

fn cfg_err(section: &str, msg: impl std::fmt::Display) -> LabError {
    LabError::Config(format!("[{section}] {msg}"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            LabError::Config(m) => LabError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses and validates; every failure is a `Config` error.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn domain_kind(&self) -> Result<DomainKind> {
        self.domain.kind.parse().map_err(|e: LabError| cfg_err("domain", e))
    }

    pub fn solver_options(&self) -> Result<SolverOptions> {
        let s = &self.solver;
        if !(s.tol > 0.0 && s.tol.is_finite()) {
            return Err(cfg_err("solver", format!("tol = {} must be positive", s.tol)));
        }
        if s.max_sweeps == 0 {
            return Err(cfg_err("solver", "max_sweeps must be at least 1"));
        }
        let relaxation = match &s.relaxation {
            RelaxationSetting::Named(n) if n == "auto" => Relaxation::Auto,
            RelaxationSetting::Named(n) => {
                return Err(cfg_err("solver", format!("unknown relaxation \"{n}\" (use \"auto\" or a number)")))
            }
            RelaxationSetting::Factor(w) if *w > 0.0 && *w < 2.0 => Relaxation::Fixed(*w),
            RelaxationSetting::Factor(w) => {
                return Err(cfg_err("solver", format!("relaxation {w} must lie in (0, 2)")))
            }
        };
        Ok(SolverOptions {
            tol: s.tol,
            max_sweeps: s.max_sweeps,
            relaxation,
            audit: false,
            residual_trace: false,
        })
    }

    pub fn load_rule(&self) -> Result<LoadRule> {
        match self.solver.load_rule.as_str() {
            "nearest" => Ok(LoadRule::Nearest),
            "hat" => Ok(LoadRule::Hat),
            other => Err(cfg_err("solver", format!("unknown load_rule \"{other}\""))),
        }
    }

    /// Builds the instance and measure at the configured resolution.
    pub fn build(&self) -> Result<(Instance, MeasureData)> {
        self.build_at(self.domain.resolution)
    }

    pub fn build_at(&self, resolution: usize) -> Result<(Instance, MeasureData)> {
        let kind = self.domain_kind()?;
        let grid = build_grid(kind, resolution).map_err(|e| cfg_err("domain", e))?;
        let flux = self.flux(&grid)?;
        let mu = MeasureData::new(&grid, self.measure.atoms.clone(), self.measure.density.as_ref())
            .map_err(|e| cfg_err("measure", e))?;
        let ob = &self.obstacles;
        check_box(&grid, ob)?;
        let mut inst = Instance::new(grid, flux, ob.lower.clone(), ob.upper.clone(), ob.boundary.clone())
            .with_options(self.solver_options()?);
        inst.load_rule = self.load_rule()?;
        Ok((inst, mu))
    }

    fn flux(&self, grid: &Grid) -> Result<Flux> {
        let e = &self.exponent;
        let field = ExponentField::for_grid(e.spec.clone(), grid).map_err(|err| cfg_err("exponent", err))?;
        for (name, declared, actual) in [("p_minus", e.p_minus, field.p_minus), ("p_plus", e.p_plus, field.p_plus)] {
            if let Some(d) = declared {
                if (d - actual).abs() > 1e-12 * actual.abs().max(1.0) {
                    return Err(cfg_err("exponent", format!("declared {name} = {d} but the function gives {actual}")));
                }
            }
        }
        let weight = WeightField::new(self.flux.weight.clone()).map_err(|err| cfg_err("flux", err))?;
        if let Some(eps) = self.flux.eps_reg {
            if !(eps >= 0.0 && eps.is_finite()) {
                return Err(cfg_err("flux", format!("eps_reg = {eps} must be nonnegative")));
            }
        }
        for (name, l) in [("lambda1", self.flux.lambda1), ("lambda2", self.flux.lambda2)] {
            if let Some(l) = l {
                if !(l > 0.0 && l.is_finite()) {
                    return Err(cfg_err("flux", format!("{name} = {l} must be positive")));
                }
            }
        }
        let flux = Flux::new(field, weight, self.flux.eps_reg).with_declared(self.flux.lambda1, self.flux.lambda2);
        if flux.lambda2 > flux.lambda1 {
            return Err(cfg_err(
                "flux",
                format!("lambda2 = {} exceeds lambda1 = {}", flux.lambda2, flux.lambda1),
            ));
        }
        Ok(flux)
    }

    fn validate(&self) -> Result<()> {
        let kind = self.domain_kind()?;
        let dim = kind.dim();
        if self.domain.resolution < 3 {
            return Err(cfg_err("domain", LabError::ResolutionTooSmall(self.domain.resolution)));
        }
        if let Some(&n) = self.sweep.resolutions.iter().find(|&&n| n < 3) {
            return Err(cfg_err("sweep", LabError::ResolutionTooSmall(n)));
        }
        self.solver_options()?;
        self.load_rule()?;
        let h = &self.harness;
        if h.q.iter().any(|&q| !(q > 0.0 && q.is_finite())) {
            return Err(cfg_err("harness", "every q must be positive"));
        }
        if !(h.epsilon > 0.0 && h.epsilon < 1.0) {
            return Err(cfg_err("harness", format!("epsilon = {} must lie in (0, 1)", h.epsilon)));
        }
        if !(h.level_ratio > 1.0) {
            return Err(cfg_err("harness", format!("level_ratio = {} must exceed 1", h.level_ratio)));
        }
        if !(h.delta > 0.0 && h.delta < 1.0) {
            return Err(cfg_err("harness", format!("delta = {} must lie in (0, 1)", h.delta)));
        }
        if !(h.tau0 > 0.0) {
            return Err(cfg_err("harness", format!("tau0 = {} must be positive", h.tau0)));
        }
        if !(h.big_r > 0.0 && h.big_r < 1.0) {
            return Err(cfg_err("harness", format!("big_r = {} must lie in (0, 1)", h.big_r)));
        }
        if let Some(r0) = h.r0 {
            if !(r0 > 0.0) {
                return Err(cfg_err("harness", format!("r0 = {r0} must be positive")));
            }
        }
        if h.mollify.first() == Some(&0) || h.mollify.windows(2).any(|w| w[1] <= w[0]) {
            return Err(cfg_err("harness", "mollify indices must be positive and strictly increasing"));
        }
        let c = &self.chain;
        if c.radii.iter().any(|&r| !(r > 0.0)) {
            return Err(cfg_err("chain", "every radius must be positive"));
        }
        if !(c.sigma > 0.0 && c.sigma <= h.tau0) {
            return Err(cfg_err("chain", format!("sigma = {} must lie in (0, tau0 = {}]", c.sigma, h.tau0)));
        }
        if !(c.beta > 0.0 && c.beta <= 1.0) {
            return Err(cfg_err("chain", format!("beta = {} must lie in (0, 1]", c.beta)));
        }
        if !(c.rho_factor > 0.0 && c.rho_factor <= 4.0) {
            return Err(cfg_err("chain", format!("rho_factor = {} must lie in (0, 4]", c.rho_factor)));
        }
        let grid = build_grid(kind, self.domain.resolution).map_err(|e| cfg_err("domain", e))?;
        let flux = self.flux(&grid)?;
        if let Some(b) = alpha_bound(dim, flux.exponent.p_minus) {
            if let Some(a) = h.alpha.iter().find(|&&a| !(a > 0.0 && (a < b || (dim == 2 && a <= b)))) {
                return Err(cfg_err("harness", format!("alpha = {a} outside the admissible range (0, {b}]")));
            }
        } else if !h.alpha.is_empty() {
            return Err(cfg_err("harness", "alpha range is empty for this exponent; leave alpha empty"));
        }
        MeasureData::new(&grid, self.measure.atoms.clone(), self.measure.density.as_ref())
            .map_err(|e| cfg_err("measure", e))?;
        check_box(&grid, &self.obstacles)?;
        for r in &h.test_exponents {
            let lo = grid.cells.iter().map(|c| r.eval(c.center)).fold(f64::INFINITY, f64::min);
            if !(lo > 1.0) {
                return Err(cfg_err("harness", format!("test exponent {r:?} has minimum {lo}, need > 1")));
            }
        }
        for x in &c.centers {
            if !grid.contains(*x) {
                return Err(cfg_err("chain", format!("center ({}, {}) lies outside the domain", x[0], x[1])));
            }
        }
        Ok(())
    }
}

/// `psi_1 <= psi_2` on the domain and `psi_1 <= g <= psi_2` on the boundary.
fn check_box(grid: &Grid, ob: &ObstacleBlock) -> Result<()> {
    let dim = grid.dim;
    for (k, &x) in grid.coords.iter().enumerate() {
        let flag = grid.flags[k];
        if flag == NodeFlag::Exterior {
            continue;
        }
        let (lo, hi) = (ob.lower.eval(dim, x), ob.upper.eval(dim, x));
        if !(lo <= hi) {
            return Err(cfg_err("obstacles", LabError::InfeasibleBox { node: k, lower: lo, upper: hi }));
        }
        if flag == NodeFlag::Dirichlet {
            let g = ob.boundary.eval(dim, x);
            if !(lo <= g && g <= hi) {
                return Err(cfg_err(
                    "obstacles",
                    LabError::BoundaryOutsideBox {
                        node: k,
                        value: g,
                        lower: lo,
                        upper: hi,
                    },
                ));
            }
        }
    }
    Ok(())
}
