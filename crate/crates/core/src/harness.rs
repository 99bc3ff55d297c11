//! Estimate harness: divergence fields of obstacles and boundary data,
//! approximation sequences, the L^1 energy bound, level-set decay and the
//! assembled gradient estimates with their c-free ratios.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::exponent::{flux_kernel, Coefficients, ExponentSpec, Flux, WeightSpec};
use crate::field::{element_gradient, grad_diff_power_integral, grad_power_integral, norm, CellField, GridFunction};
use crate::geometry::{ball_volume, Point};
use crate::grid::{Grid, NodeFlag};
use crate::maximal::{distribution_sum, frac_maximal_1, hl_maximal, DistributionReport, MaximalConfig, MaximalField, MaximalInput};
use crate::measure::{mollify, MeasureData};
use crate::solver::{solve_problem, LoadRule, ProblemSpec, SolveMode, SolveReport, SolverOptions};

fn one() -> f64 {
    1.0
}

/// Registered smooth functions for obstacles and boundary data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionSpec {
    Constant {
        value: f64,
    },
    /// `value + slope · x`.
    Affine {
        value: f64,
        slope: Point,
    },
    /// `value + curvature |x - center|^2`.
    Paraboloid {
        value: f64,
        curvature: f64,
        #[serde(default)]
        center: Point,
    },
    /// `amplitude * prod_d sin(pi frequency x_d)`.
    Sine {
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
    },
}

impl FunctionSpec {
    pub fn eval(&self, dim: usize, x: Point) -> f64 {
        let y = if dim == 1 { 0.0 } else { 1.0 };
        match self {
            FunctionSpec::Constant { value } => *value,
            FunctionSpec::Affine { value, slope } => value + slope[0] * x[0] + y * slope[1] * x[1],
            FunctionSpec::Paraboloid {
                value,
                curvature,
                center,
            } => {
                let dx = x[0] - center[0];
                let dy = y * (x[1] - center[1]);
                value + curvature * (dx * dx + dy * dy)
            }
            FunctionSpec::Sine { amplitude, frequency } => {
                let s = |t: f64| (std::f64::consts::PI * frequency * t).sin();
                if dim == 1 {
                    amplitude * s(x[0])
                } else {
                    amplitude * s(x[0]) * s(x[1])
                }
            }
        }
    }

    pub fn nodal(&self, grid: &Grid) -> GridFunction {
        GridFunction::from_fn(grid, |x| self.eval(grid.dim, x))
    }

    /// Closed-form `div a(D f, x)` at the nodes, when one is available for
    /// this flux.
    pub fn analytic_divergence(&self, flux: &Flux, grid: &Grid) -> Option<GridFunction> {
        if let FunctionSpec::Constant { .. } = self {
            return Some(GridFunction::zeros(grid));
        }
        let gamma = match flux.weight.spec {
            WeightSpec::Constant { value } => value,
            _ => return None,
        };
        if !flux.exponent.is_constant() {
            return None;
        }
        let p = flux.exponent.p_minus;
        let n = grid.dim as f64;
        let quadratic = p == 2.0;
        match self {
            FunctionSpec::Constant { .. } | FunctionSpec::Affine { .. } => Some(GridFunction::zeros(grid)),
            FunctionSpec::Paraboloid { curvature, center, .. } => {
                let b = *curvature;
                if quadratic {
                    Some(GridFunction::constant(grid, gamma * 2.0 * b * n))
                } else if flux.eps_reg == 0.0 && p > 2.0 {
                    let c = *center;
                    Some(GridFunction::from_fn(grid, |x| {
                        let dy = if grid.dim == 1 { 0.0 } else { x[1] - c[1] };
                        let rho = (x[0] - c[0]).hypot(dy);
                        gamma * 2.0 * b * (2.0 * b.abs()).powf(p - 2.0) * (n + p - 2.0) * rho.powf(p - 2.0)
                    }))
                } else {
                    None
                }
            }
            FunctionSpec::Sine { frequency, .. } if quadratic => {
                let k2 = (std::f64::consts::PI * frequency).powi(2);
                Some(GridFunction::from_fn(grid, |x| -gamma * n * k2 * self.eval(grid.dim, x)))
            }
            FunctionSpec::Sine { .. } => None,
        }
    }
}

fn is_inner(grid: &Grid, k: usize) -> bool {
    let per = if grid.dim == 1 { 2 } else { 4 };
    grid.flags[k] == NodeFlag::Interior && grid.node_cells(k).len() == per
}

/// Weak divergence of `a(D psi, .)` against the nodal hat functions:
/// `Psi_j = -(1/A_j) sum_e w_e a(grad psi, x_c) · grad hat_j`. Nodes without a
/// full hat support take the mean of their inner neighbours.
pub fn psi_divergence(psi: &GridFunction, coeffs: &dyn Coefficients, grid: &Grid) -> GridFunction {
    let n = grid.node_count();
    let eps2 = coeffs.eps_reg() * coeffs.eps_reg();
    let inv = 1.0 / grid.h;
    let mut acc = vec![0.0; n];
    for e in &grid.elements {
        let (gamma, p) = coeffs.at(grid.cells[e.cell].center);
        let a = flux_kernel(gamma, p, eps2, element_gradient(grid, e, &psi.values));
        let sx = e.weight * a[0] * inv;
        acc[e.gx.1] += sx;
        acc[e.gx.0] -= sx;
        if let Some((j0, j1)) = e.gy {
            let sy = e.weight * a[1] * inv;
            acc[j1] += sy;
            acc[j0] -= sy;
        }
    }
    let mut out = vec![0.0; n];
    for k in 0..n {
        if is_inner(grid, k) {
            out[k] = -acc[k] / grid.node_area(k);
        }
    }
    for k in 0..n {
        if grid.flags[k] == NodeFlag::Exterior || is_inner(grid, k) {
            continue;
        }
        let mut s = 0.0;
        let mut m = 0usize;
        for &c in grid.node_cells(k) {
            for &j in &grid.cells[c].corners {
                if j != k && is_inner(grid, j) {
                    s += out[j];
                    m += 1;
                }
            }
        }
        out[k] = if m > 0 { s / m as f64 } else { 0.0 };
    }
    GridFunction { values: out }
}

#[derive(Clone, Debug)]
pub struct Divergence {
    /// Field used downstream (analytic when registered, discrete otherwise).
    pub nodal: GridFunction,
    pub discrete: GridFunction,
    pub analytic: bool,
    /// Largest gap between analytic and discrete values at inner nodes.
    pub gap: Option<f64>,
    /// Corner means of `|nodal|`.
    pub cells: CellField,
}

impl Divergence {
    pub fn compute(spec: &FunctionSpec, flux: &Flux, grid: &Grid) -> Self {
        let discrete = psi_divergence(&spec.nodal(grid), flux, grid);
        let (nodal, analytic, gap) = match spec.analytic_divergence(flux, grid) {
            Some(a) => {
                let gap = a.max_abs_diff_on(&discrete, (0..grid.node_count()).filter(|&k| is_inner(grid, k)));
                (a, true, Some(gap))
            }
            None => (discrete.clone(), false, None),
        };
        let cells = CellField::abs_corner_mean(grid, &nodal);
        Divergence {
            nodal,
            discrete,
            analytic,
            gap,
            cells,
        }
    }

    /// `int |div a(D f)|`.
    pub fn l1(&self, grid: &Grid) -> f64 {
        self.cells.integral(grid)
    }

    pub fn is_zero(&self) -> bool {
        self.nodal.values.iter().all(|&v| v == 0.0)
    }
}

/// A double obstacle problem with everything except the measure fixed.
pub struct Instance {
    pub grid: Grid,
    pub flux: Flux,
    pub psi1: FunctionSpec,
    pub psi2: FunctionSpec,
    pub g: FunctionSpec,
    pub lower: GridFunction,
    pub upper: GridFunction,
    pub boundary: GridFunction,
    pub div_psi1: Divergence,
    pub div_psi2: Divergence,
    pub div_g: Divergence,
    pub options: SolverOptions,
    pub load_rule: LoadRule,
}

impl Instance {
    pub fn new(grid: Grid, flux: Flux, psi1: FunctionSpec, psi2: FunctionSpec, g: FunctionSpec) -> Self {
        let lower = psi1.nodal(&grid);
        let upper = psi2.nodal(&grid);
        let boundary = g.nodal(&grid);
        let div_psi1 = Divergence::compute(&psi1, &flux, &grid);
        let div_psi2 = Divergence::compute(&psi2, &flux, &grid);
        let div_g = Divergence::compute(&g, &flux, &grid);
        Instance {
            grid,
            flux,
            psi1,
            psi2,
            g,
            lower,
            upper,
            boundary,
            div_psi1,
            div_psi2,
            div_g,
            options: SolverOptions::accelerated(),
            load_rule: LoadRule::Nearest,
        }
    }

    /// Obstacles at `-+1e6` and zero boundary data.
    pub fn free(grid: Grid, flux: Flux) -> Self {
        Self::new(
            grid,
            flux,
            FunctionSpec::Constant { value: -1e6 },
            FunctionSpec::Constant { value: 1e6 },
            FunctionSpec::Constant { value: 0.0 },
        )
    }

    pub fn with_options(mut self, options: SolverOptions) -> Self {
        self.options = options;
        self
    }

    pub fn solve_with(&self, mu: &MeasureData) -> Result<(GridFunction, SolveReport)> {
        let mut spec = ProblemSpec::new(&self.grid, &self.flux, &self.boundary);
        spec.mode = SolveMode::Double;
        spec.lower = Some(&self.lower);
        spec.upper = Some(&self.upper);
        spec.measure = Some(mu);
        spec.load_rule = self.load_rule;
        solve_problem(&spec, &self.options)
    }

    /// `int |Dg|`.
    pub fn grad_g_l1(&self) -> f64 {
        grad_power_integral(&self.grid, &self.boundary, None, |_| 1.0)
    }

    pub fn p_minus(&self) -> f64 {
        self.flux.exponent.p_minus
    }

    pub fn cell_exponents(&self) -> Vec<f64> {
        self.grid.cells.iter().map(|c| self.flux.exponent.eval(c.center)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct CauchyRow {
    pub i: usize,
    pub j: usize,
    pub r_id: usize,
    pub modular: f64,
    pub consecutive: bool,
    /// `r(x) >= min{n(p(x)-1)/(n-1), p(x)}` somewhere on the grid.
    pub out_of_theory: bool,
}

#[derive(Clone, Debug)]
pub struct ApproxMember {
    pub index: usize,
    pub mass: f64,
    pub report: SolveReport,
}

#[derive(Clone, Debug)]
pub struct CauchyReport {
    pub members: Vec<ApproxMember>,
    pub rows: Vec<CauchyRow>,
    /// Solution for the finest index; stands in for the limit.
    pub designated: GridFunction,
    pub designated_index: usize,
    /// Last consecutive modular of the first test exponent.
    pub last_modular: Option<f64>,
}

impl CauchyReport {
    /// Consecutive modulars of one test exponent, in index order.
    pub fn consecutive(&self, r_id: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.consecutive && r.r_id == r_id)
            .map(|r| r.modular)
            .collect()
    }
}

pub fn out_of_theory(r: &ExponentSpec, inst: &Instance) -> bool {
    let n = inst.grid.dim as f64;
    inst.grid.cells.iter().any(|c| {
        let p = inst.flux.exponent.eval(c.center);
        let sobolev = if inst.grid.dim == 1 { f64::INFINITY } else { n * (p - 1.0) / (n - 1.0) };
        r.eval(c.center) >= sobolev.min(p)
    })
}

/// Solves the problem for each mollified measure `mu_i` and tabulates the
/// pairwise gradient modulars `sum_e w_e |grad u_i - grad u_j|^{r(x_c)}`.
pub fn approximation_study(
    inst: &Instance,
    mu: &MeasureData,
    i_list: &[usize],
    r_list: &[ExponentSpec],
) -> Result<CauchyReport> {
    if i_list.is_empty() || i_list[0] == 0 || i_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LabError::InvalidArgument(
            "mollification indices must be positive and strictly increasing".into(),
        ));
    }
    let grid = &inst.grid;
    let solved: Vec<(GridFunction, ApproxMember)> = i_list
        .par_iter()
        .map(|&i| {
            let m = mollify(mu, i, grid)?;
            let (u, report) = inst.solve_with(&m.as_measure()).map_err(|e| e.in_stage("approximation"))?;
            Ok((
                u,
                ApproxMember {
                    index: i,
                    mass: m.l1_norm(grid),
                    report,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let flags: Vec<bool> = r_list.iter().map(|r| out_of_theory(r, inst)).collect();
    let mut rows = Vec::new();
    for a in 0..solved.len() {
        for b in a + 1..solved.len() {
            for (r_id, r) in r_list.iter().enumerate() {
                let modular = grad_diff_power_integral(grid, &solved[a].0, Some(&solved[b].0), None, |x| r.eval(x));
                rows.push(CauchyRow {
                    i: i_list[a],
                    j: i_list[b],
                    r_id,
                    modular,
                    consecutive: b == a + 1,
                    out_of_theory: flags[r_id],
                });
            }
        }
    }
    let mut members = Vec::with_capacity(solved.len());
    let mut designated = GridFunction::zeros(grid);
    for (u, m) in solved {
        designated = u;
        members.push(m);
    }
    let report = CauchyReport {
        designated_index: *i_list.last().unwrap(),
        designated,
        members,
        last_modular: None,
        rows,
    };
    let last = report.consecutive(0).last().copied();
    Ok(CauchyReport {
        last_modular: last,
        ..report
    })
}

/// Upper end of the admissible `alpha` range; `None` when it is empty.
pub fn alpha_bound(dim: usize, p_minus: f64) -> Option<f64> {
    if dim == 1 {
        return Some(1.0);
    }
    let n = dim as f64;
    let b = 0.5 * (n / (n - 1.0) - 1.0 / (p_minus - 1.0));
    (b > 0.0).then_some(b)
}

fn check_alpha(dim: usize, p_minus: f64, alpha: f64) -> Result<()> {
    let ok = match alpha_bound(dim, p_minus) {
        Some(b) if dim == 1 => alpha > 0.0 && alpha < b,
        Some(b) => alpha > 0.0 && alpha <= b,
        None => false,
    };
    if ok {
        Ok(())
    } else {
        Err(LabError::Precondition(format!(
            "alpha = {alpha} outside the admissible range (0, {:?}] for n = {dim}, p^- = {p_minus}",
            alpha_bound(dim, p_minus)
        )))
    }
}

#[derive(Clone, Debug)]
pub struct L1Estimate {
    pub alpha: f64,
    /// `int |Du|`.
    pub lhs: f64,
    /// `|mu| + int |div a(Dg)| + int |Dg| + 1`.
    pub linear: f64,
    /// `|mu| + int |div a(Dg)| + 1`.
    pub base: f64,
    pub exponent: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// c-free form of the energy bound
/// `int |Du| <= (|mu| + G + int |Dg| + 1) + (|mu| + G + 1)^{1/((p^- - 1)(1 - alpha))}`.
pub fn energy_l1_estimate(inst: &Instance, u: &GridFunction, mu: &MeasureData, alpha: f64) -> Result<L1Estimate> {
    let grid = &inst.grid;
    check_alpha(grid.dim, inst.p_minus(), alpha)?;
    let lhs = grad_power_integral(grid, u, None, |_| 1.0);
    let mass = mu.total_mass(grid);
    let gdiv = inst.div_g.l1(grid);
    let linear = mass + gdiv + inst.grad_g_l1() + 1.0;
    let base = mass + gdiv + 1.0;
    let exponent = 1.0 / ((inst.p_minus() - 1.0) * (1.0 - alpha));
    let rhs = linear + base.powf(exponent);
    Ok(L1Estimate {
        alpha,
        lhs,
        linear,
        base,
        exponent,
        rhs,
        ratio: lhs / rhs,
    })
}

#[derive(Clone, Debug)]
pub struct R0Report {
    /// Radius used downstream.
    pub r0: f64,
    /// Largest radius passing all checks.
    pub derived: f64,
    pub overridden: bool,
    pub m: f64,
    pub m1: f64,
    pub q: f64,
    /// `R/2`, `1/(6 M_1)`, `1/(M + 1)`.
    pub caps: [f64; 3],
    /// `min{1/(2n), Lambda_2/(2 Lambda_1), tau_0/4}`.
    pub omega_cap: f64,
    pub tau0: f64,
}

/// Largest `R_0` with `R_0 <= min{R/2, 1/(6 M_1), 1/(M+1)}` and
/// `omega(2 R_0) <= min{1/(2n), Lambda_2/(2 Lambda_1), tau_0/4}`.
pub fn select_r0(
    inst: &Instance,
    u: &GridFunction,
    mu: &MeasureData,
    big_r: f64,
    tau0: f64,
    r0_override: Option<f64>,
) -> Result<R0Report> {
    if !(big_r > 0.0 && big_r < 1.0) {
        return Err(LabError::InvalidArgument(format!("R = {big_r} must lie in (0, 1)")));
    }
    if !(tau0 > 0.0) {
        return Err(LabError::InvalidArgument(format!("tau_0 = {tau0} must be positive")));
    }
    let grid = &inst.grid;
    let n = grid.dim as f64;
    let pm = inst.p_minus();
    let du = grad_power_integral(grid, u, None, |_| 1.0);
    let kappa = mu.total_mass(grid) + grid.area();
    let divs = inst.div_psi1.l1(grid) + inst.div_psi2.l1(grid);
    let m = kappa + divs + du + 1.0;
    let q = kappa + divs + 1.0;
    let m1 = du + grid.diameter().powf((n * (pm - 2.0) + 1.0) / (pm - 1.0)) * q.powf(1.0 / (pm - 1.0)) + 1.0;
    let caps = [big_r / 2.0, 1.0 / (6.0 * m1), 1.0 / (m + 1.0)];
    let cap = caps.iter().copied().fold(f64::INFINITY, f64::min);
    let omega_cap = (1.0 / (2.0 * n)).min(inst.flux.lambda2 / (2.0 * inst.flux.lambda1)).min(tau0 / 4.0);
    let omega = |r: f64| inst.flux.exponent.modulus(2.0 * r);
    let derived = if omega(cap) <= omega_cap {
        cap
    } else {
        let (mut lo, mut hi) = (0.0, cap);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if omega(mid) <= omega_cap {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    if let Some(r) = r0_override {
        if !(r > 0.0 && r < 1.0) {
            return Err(LabError::InvalidArgument(format!("R_0 override {r} must lie in (0, 1)")));
        }
    }
    Ok(R0Report {
        r0: r0_override.unwrap_or(derived),
        derived,
        overridden: r0_override.is_some(),
        m,
        m1,
        q,
        caps,
        omega_cap,
        tau0,
    })
}

/// Cell-wise mean over the elements of `|Du|^{p(x_c)}`.
fn cell_grad_power(grid: &Grid, u: &GridFunction, p: &[f64]) -> CellField {
    let mut values = vec![0.0; grid.cell_count()];
    for e in &grid.elements {
        let g = norm(element_gradient(grid, e, &u.values));
        if g > 0.0 {
            values[e.cell] += e.weight * g.powf(p[e.cell]);
        }
    }
    for (v, c) in values.iter_mut().zip(&grid.cells) {
        *v /= c.area;
    }
    CellField { values }
}

/// Maximal-function fields of one solved instance.
pub struct MaximalFields {
    pub grad: CellField,
    pub m_grad: MaximalField,
    pub m1_mu: MaximalField,
    pub m1_kappa: MaximalField,
    pub m1_psi1: MaximalField,
    pub m1_psi2: MaximalField,
    pub m1_g: MaximalField,
    /// `M(|D psi_i|^{p(.)})`, only when `p^- >= 2`.
    pub m_dpsi: Option<[MaximalField; 2]>,
    /// Exponent at the cell centers.
    pub p_cells: Vec<f64>,
}

impl MaximalFields {
    pub fn compute(inst: &Instance, u: &GridFunction, mu: &MeasureData, config: &MaximalConfig) -> Self {
        let grid = &inst.grid;
        let grad = crate::field::cell_gradient_norm(grid, u);
        let p_cells = inst.cell_exponents();
        let m_dpsi = (inst.p_minus() >= 2.0).then(|| {
            [&inst.lower, &inst.upper]
                .map(|psi| hl_maximal(&cell_grad_power(grid, psi, &p_cells), grid, config))
        });
        MaximalFields {
            m_grad: hl_maximal(&grad, grid, config),
            m1_mu: frac_maximal_1(MaximalInput::Measure(mu), grid, config),
            m1_kappa: frac_maximal_1(MaximalInput::Kappa(mu), grid, config),
            m1_psi1: frac_maximal_1(MaximalInput::Cells(&inst.div_psi1.cells), grid, config),
            m1_psi2: frac_maximal_1(MaximalInput::Cells(&inst.div_psi2.cells), grid, config),
            m1_g: frac_maximal_1(MaximalInput::Cells(&inst.div_g.cells), grid, config),
            grad,
            m_dpsi,
            p_cells,
        }
    }

    pub fn atom_nodes(&self) -> usize {
        self.m1_mu.atom_nodes.len()
    }
}

/// `sum_c |c| f_c^{e(p_c)}`.
fn power_integral(f: &CellField, grid: &Grid, p: &[f64], e: impl Fn(f64) -> f64) -> f64 {
    f.values
        .iter()
        .zip(&grid.cells)
        .zip(p)
        .map(|((&v, c), &pc)| if v == 0.0 { 0.0 } else { c.area * v.abs().powf(e(pc)) })
        .sum()
}

#[derive(Clone, Debug)]
pub struct DecayConfig {
    pub epsilon: f64,
    /// Level ratio `N`.
    pub n_level: f64,
    pub delta: f64,
    pub q: f64,
    pub r0: f64,
}

#[derive(Clone, Debug)]
pub struct DecayRow {
    pub k: usize,
    pub c_measure: f64,
    pub d_measure: f64,
    /// `epsilon (80/7)^n |D_{N,k}|`.
    pub covering_bound: f64,
    pub covering_ok: bool,
    /// `N^{qk} |C_{N,k}|`.
    pub term: f64,
}

#[derive(Clone, Debug)]
pub struct DecayReport {
    pub lambda0: f64,
    pub rows: Vec<DecayRow>,
    pub s: f64,
    /// Smallest `k` with empty `C_{N,k}`, or the cap.
    pub k_max: usize,
    pub capped: bool,
    /// `C_{N,k+1} ⊆ C_{N,k} ⊆ D_{N,k}` at every cell and node.
    pub nested: bool,
    /// Geometric mean ratio over the last (up to five) nonzero terms.
    pub terminal_ratio: Option<f64>,
    pub sandwich: DistributionReport,
    pub sandwich_ok: bool,
}

pub const K_CAP: usize = 60;

/// Ratio of consecutive terms averaged geometrically over the last `window`
/// nonzero terms.
pub fn terminal_ratio(terms: &[f64], window: usize) -> Option<f64> {
    let nz: Vec<f64> = terms.iter().copied().filter(|&t| t > 0.0).collect();
    let tail = &nz[nz.len().saturating_sub(window)..];
    if tail.len() < 2 {
        return None;
    }
    Some((tail[tail.len() - 1] / tail[0]).powf(1.0 / (tail.len() - 1) as f64))
}

pub fn level_set_decay(inst: &Instance, u: &GridFunction, fields: &MaximalFields, cfg: &DecayConfig) -> Result<DecayReport> {
    if !(cfg.epsilon > 0.0 && cfg.epsilon < 1.0 && cfg.n_level > 1.0 && cfg.delta > 0.0 && cfg.q > 0.0 && cfg.r0 > 0.0) {
        return Err(LabError::InvalidArgument(format!(
            "decay parameters need 0 < epsilon < 1, N > 1, delta > 0, q > 0, R_0 > 0 (got {cfg:?})"
        )));
    }
    let grid = &inst.grid;
    let du = grad_power_integral(grid, u, None, |_| 1.0);
    let lambda0 = (du + 1.0) / (cfg.epsilon * ball_volume(grid.dim, cfg.r0));
    if !(lambda0 > 1.0) {
        return Err(LabError::Invariant(format!(
            "lambda_0 = {lambda0} must exceed 1 (epsilon |B_R0| >= 1)"
        )));
    }
    let pm1 = |p: f64| 1.0 / (p - 1.0);
    // Per point: (M|Du|, largest data term) so that D_{N,k} = {a > t} ∪ {b > delta t}.
    let data_term = |idx: usize, p: f64, cells: bool| -> f64 {
        let pick = |f: &MaximalField| if cells { f.cells.values[idx] } else { f.nodal.values[idx] };
        let mut b = pick(&fields.m1_kappa).powf(pm1(p));
        match &fields.m_dpsi {
            Some(m) => {
                for f in m {
                    b = b.max(pick(f).powf(1.0 / p));
                }
            }
            None => {
                b = b.max(pick(&fields.m1_psi1).powf(pm1(p)));
                b = b.max(pick(&fields.m1_psi2).powf(pm1(p)));
            }
        }
        b
    };
    let cell_pts: Vec<(f64, f64, f64)> = (0..grid.cell_count())
        .map(|c| (fields.m_grad.cells.values[c], data_term(c, fields.p_cells[c], true), grid.cells[c].area))
        .collect();
    let node_pts: Vec<(f64, f64)> = (0..grid.node_count())
        .filter(|&k| grid.flags[k] != NodeFlag::Exterior)
        .map(|k| (fields.m_grad.nodal.values[k], data_term(k, inst.flux.exponent.eval(grid.coords[k]), false)))
        .collect();

    let n = grid.dim as i32;
    let mut rows = Vec::new();
    let mut nested = true;
    let mut k = 0usize;
    let mut capped = false;
    loop {
        let t = cfg.n_level.powi(k as i32) * lambda0;
        let t_up = t * cfg.n_level;
        let t_next = t_up * cfg.n_level;
        let mut c_measure = 0.0;
        let mut d_measure = 0.0;
        let in_d = |a: f64, b: f64| a > t || b > cfg.delta * t;
        for &(a, b, area) in &cell_pts {
            let c = a > t_up;
            let d = in_d(a, b);
            nested &= (!c || d) && (a <= t_next || c);
            if c {
                c_measure += area;
            }
            if d {
                d_measure += area;
            }
        }
        for &(a, b) in &node_pts {
            nested &= (a <= t_up || in_d(a, b)) && (a <= t_next || a > t_up);
        }
        let covering_bound = cfg.epsilon * (80.0f64 / 7.0).powi(n) * d_measure;
        rows.push(DecayRow {
            k,
            c_measure,
            d_measure,
            covering_bound,
            covering_ok: c_measure <= covering_bound,
            term: cfg.n_level.powf(cfg.q * k as f64) * c_measure,
        });
        if c_measure == 0.0 {
            break;
        }
        if k == K_CAP {
            capped = true;
            break;
        }
        k += 1;
    }
    let terms: Vec<f64> = rows.iter().map(|r| r.term).collect();
    let sandwich = distribution_sum(&fields.m_grad.cells, grid, lambda0, cfg.n_level, cfg.q)?;
    let sandwich_ok = sandwich.c_emp <= sandwich.c_bound * (1.0 + 1e-12);
    Ok(DecayReport {
        lambda0,
        s: terms.iter().sum(),
        k_max: k,
        capped,
        nested,
        terminal_ratio: terminal_ratio(&terms, 5),
        rows,
        sandwich,
        sandwich_ok,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    General,
    PMinusGe2,
    ConstantP,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::General, Variant::PMinusGe2, Variant::ConstantP];

    pub fn name(self) -> &'static str {
        match self {
            Variant::General => "general",
            Variant::PMinusGe2 => "p_minus_ge_2",
            Variant::ConstantP => "constant_p",
        }
    }

    /// Whether the variant's precondition holds for this instance.
    pub fn applies(self, inst: &Instance) -> bool {
        match self {
            Variant::General => true,
            Variant::PMinusGe2 => inst.p_minus() >= 2.0,
            Variant::ConstantP => inst.flux.exponent.is_constant(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EstimateReport {
    pub variant: Variant,
    pub q: f64,
    pub alpha: f64,
    /// `int |Du|^q`.
    pub lhs: f64,
    /// `V` (general), `W` (p^- >= 2) or zero (constant p).
    pub potential: f64,
    /// `(V + V^{1/((p^- - 1)(1 - alpha))})^{(n+1) q}` or its `W` analogue.
    pub potential_term: f64,
    /// `int M_1(mu)^{q/(p-1)}`.
    pub m_mu: f64,
    /// Obstacle terms: fractional maximal of the divergences, or the
    /// Hardy-Littlewood form for `p^- >= 2`.
    pub m_psi1: f64,
    pub m_psi2: f64,
    /// `(int M_1(G)^{1/(p-1)} + int |Dg|)^q`, constant-p variant only.
    pub g_term: f64,
    pub constant: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub atom_nodes: usize,
    pub domain: &'static str,
    pub resolution: usize,
    pub h: f64,
}

pub fn main_estimate_report(
    inst: &Instance,
    u: &GridFunction,
    mu: &MeasureData,
    fields: &MaximalFields,
    q: f64,
    alpha: f64,
    variant: Variant,
) -> Result<EstimateReport> {
    if !(q > 0.0) {
        return Err(LabError::InvalidArgument(format!("moment q = {q} must be positive")));
    }
    if !variant.applies(inst) {
        return Err(LabError::Precondition(format!(
            "variant {} does not apply (p^- = {}, constant exponent: {})",
            variant.name(),
            inst.p_minus(),
            inst.flux.exponent.is_constant()
        )));
    }
    let grid = &inst.grid;
    let n = grid.dim as f64;
    let pm = inst.p_minus();
    let p = &fields.p_cells;
    let lhs = grad_power_integral(grid, u, None, |_| q);
    let frac = |f: &MaximalField| power_integral(&f.cells, grid, p, |pc| q / (pc - 1.0));
    let m_mu = frac(&fields.m1_mu);
    let mass = mu.total_mass(grid);
    let poly = |v: f64| -> Result<f64> {
        check_alpha(grid.dim, pm, alpha)?;
        Ok((v + v.powf(1.0 / ((pm - 1.0) * (1.0 - alpha)))).powf((n + 1.0) * q))
    };
    let (potential, potential_term, m_psi1, m_psi2, g_term) = match variant {
        Variant::General => {
            let v = mass + inst.div_psi1.l1(grid) + inst.div_psi2.l1(grid) + inst.div_g.l1(grid) + inst.grad_g_l1();
            (v, poly(v)?, frac(&fields.m1_psi1), frac(&fields.m1_psi2), 0.0)
        }
        Variant::PMinusGe2 => {
            let pe = |x: Point| inst.flux.exponent.eval(x);
            let w = mass
                + grad_power_integral(grid, &inst.lower, None, pe)
                + grad_power_integral(grid, &inst.upper, None, pe)
                + grad_power_integral(grid, &inst.boundary, None, pe);
            let m = fields
                .m_dpsi
                .as_ref()
                .ok_or_else(|| LabError::Precondition("obstacle maximal fields were not computed".into()))?;
            let hl = |f: &MaximalField| power_integral(&f.cells, grid, p, |pc| q / pc);
            (w, poly(w)?, hl(&m[0]), hl(&m[1]), 0.0)
        }
        Variant::ConstantP => {
            let g1 = power_integral(&fields.m1_g.cells, grid, p, |pc| 1.0 / (pc - 1.0));
            let g_term = (g1 + inst.grad_g_l1()).powf(q);
            (0.0, 0.0, frac(&fields.m1_psi1), frac(&fields.m1_psi2), g_term)
        }
    };
    let constant = 1.0;
    let rhs = potential_term + m_mu + m_psi1 + m_psi2 + g_term + constant;
    Ok(EstimateReport {
        variant,
        q,
        alpha,
        lhs,
        potential,
        potential_term,
        m_mu,
        m_psi1,
        m_psi2,
        g_term,
        constant,
        rhs,
        ratio: lhs / rhs,
        atom_nodes: fields.atom_nodes(),
        domain: grid.kind.name(),
        resolution: grid.resolution,
        h: grid.h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, DomainKind};

    fn dirac_1d(n: usize) -> (Instance, MeasureData) {
        let grid = build_grid(DomainKind::UnitInterval, n).unwrap();
        let flux = Flux::p_laplacian(2.0, 1).unwrap();
        (Instance::free(grid, flux), MeasureData::dirac([0.5, 0.0], 1.0))
    }

    #[test]
    fn divergence_of_affine_and_zero() {
        let grid = build_grid(DomainKind::UnitSquare, 17).unwrap();
        let flux = Flux::p_laplacian(2.0, 2).unwrap();
        let affine = GridFunction::from_fn(&grid, |x| 0.3 - 2.0 * x[0] + x[1]);
        let d = psi_divergence(&affine, &flux, &grid);
        assert!(d.values.iter().all(|v| v.abs() < 1e-10));
        let z = psi_divergence(&GridFunction::zeros(&grid), &flux, &grid);
        assert!(z.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn divergence_of_paraboloid() {
        for (kind, n) in [(DomainKind::UnitInterval, 1.0), (DomainKind::UnitSquare, 2.0)] {
            let grid = build_grid(kind, 33).unwrap();
            let flux = Flux::p_laplacian(2.0, grid.dim).unwrap();
            let spec = FunctionSpec::Paraboloid {
                value: 0.0,
                curvature: 0.5,
                center: [0.0, 0.0],
            };
            let d = Divergence::compute(&spec, &flux, &grid);
            assert!(d.analytic);
            assert!(d.nodal.values.iter().zip(&grid.flags).all(|(&v, &f)| f == NodeFlag::Exterior || v == n));
            assert!(d.gap.unwrap() <= grid.h, "gap {:?}", d.gap);
        }
    }

    #[test]
    fn divergence_of_p_paraboloid_matches_discrete() {
        let grid = build_grid(DomainKind::UnitSquare, 65).unwrap();
        let flux = Flux::p_laplacian(3.0, 2).unwrap();
        let spec = FunctionSpec::Paraboloid {
            value: 0.0,
            curvature: 1.0,
            center: [0.5, 0.5],
        };
        let d = Divergence::compute(&spec, &flux, &grid);
        assert!(d.analytic);
        // div(|Dpsi| Dpsi) = 2 * 2 * 3 * rho for psi = rho^2, p = 3, n = 2.
        let k = grid.node(48, 32);
        let rho = 0.25;
        assert!((d.nodal.values[k] - 12.0 * rho).abs() < 1e-12);
        assert!(d.gap.unwrap() < 0.1);
    }

    #[test]
    fn energy_estimate_on_green_function() {
        let (inst, mu) = dirac_1d(65);
        let (u, _) = inst.solve_with(&mu).unwrap();
        let est = energy_l1_estimate(&inst, &u, &mu, 0.25).unwrap();
        assert!((est.lhs - 0.5).abs() < 1e-6, "{est:?}");
        assert!((est.rhs - (2.0 + 2f64.powf(1.0 / 0.75))).abs() < 1e-12);
        assert!(energy_l1_estimate(&inst, &u, &mu, 0.0).is_err());
    }

    #[test]
    fn level_sets_of_zero_solution_are_empty() {
        let grid = build_grid(DomainKind::UnitSquare, 17).unwrap();
        let inst = Instance::free(grid, Flux::p_laplacian(2.0, 2).unwrap());
        let mu = MeasureData::zero();
        let (u, _) = inst.solve_with(&mu).unwrap();
        assert!(u.values.iter().all(|&v| v == 0.0));
        let cfg = MaximalConfig::sweep(&inst.grid);
        let fields = MaximalFields::compute(&inst, &u, &mu, &cfg);
        let r0 = select_r0(&inst, &u, &mu, 0.5, 0.1, None).unwrap();
        assert!(r0.r0 <= r0.caps.iter().copied().fold(f64::INFINITY, f64::min));
        let rep = level_set_decay(
            &inst,
            &u,
            &fields,
            &DecayConfig {
                epsilon: 0.5,
                n_level: 2.0,
                delta: 0.1,
                q: 1.0,
                r0: r0.r0,
            },
        )
        .unwrap();
        assert_eq!(rep.s, 0.0);
        assert_eq!(rep.k_max, 0);
        assert!(rep.nested && rep.lambda0 > 1.0);
        let est = main_estimate_report(&inst, &u, &mu, &fields, 1.0, 0.25, Variant::General).unwrap();
        assert_eq!(est.lhs, 0.0);
        assert!(est.rhs >= 1.0);
    }

    #[test]
    fn one_d_dirac_terms() {
        let (inst, mu) = dirac_1d(65);
        let (u, _) = inst.solve_with(&mu).unwrap();
        let cfg = MaximalConfig::sweep(&inst.grid);
        let fields = MaximalFields::compute(&inst, &u, &mu, &cfg);
        let est = main_estimate_report(&inst, &u, &mu, &fields, 1.0, 0.25, Variant::ConstantP).unwrap();
        assert!((est.lhs - 0.5).abs() < 1e-6);
        assert!((est.m_mu - 0.5).abs() < 1e-12);
        let gen = main_estimate_report(&inst, &u, &mu, &fields, 1.0, 0.25, Variant::General).unwrap();
        assert_eq!(gen.m_mu, est.m_mu);
        assert!(main_estimate_report(&inst, &u, &mu, &fields, 1.0, 0.25, Variant::PMinusGe2).is_ok());
        // M(|Du|) = 1/2 everywhere, so the top level is known in closed form.
        let r0 = select_r0(&inst, &u, &mu, 0.5, 0.1, None).unwrap();
        let dc = DecayConfig {
            epsilon: 0.5,
            n_level: 2.0,
            delta: 0.1,
            q: 1.0,
            r0: r0.r0,
        };
        let rep = level_set_decay(&inst, &u, &fields, &dc).unwrap();
        assert!(rep.lambda0 > 0.5);
        assert_eq!(rep.s, 0.0);
    }

    #[test]
    fn terminal_ratio_of_geometric_terms() {
        let t = [0.0, 8.0, 4.0, 2.0, 1.0, 0.5, 0.25, 0.0];
        assert!((terminal_ratio(&t, 5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(terminal_ratio(&[1.0], 5), None);
    }

    #[test]
    fn out_of_theory_flag() {
        let grid = build_grid(DomainKind::UnitSquare, 9).unwrap();
        let inst = Instance::free(grid, Flux::p_laplacian(2.0, 2).unwrap());
        assert!(!out_of_theory(&ExponentSpec::Constant { value: 1.5 }, &inst));
        assert!(out_of_theory(&ExponentSpec::Constant { value: 2.0 }, &inst));
    }
}
