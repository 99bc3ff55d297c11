//! Boundary comparison windows and the reference-problem chain
//! `u -> z -> h -> w -> v -> vbar` with its L^1 comparison ratios.

use crate::error::{LabError, Result};
use crate::exponent::{freeze_flux, Coefficients, FrozenFlux};
use crate::field::{grad_diff_power_integral, grad_sup, GridFunction};
use crate::geometry::{dist, Point};
use crate::grid::{window, Grid, NodeFlag, SubWindow};
use crate::harness::{select_r0, Instance, R0Report};
use crate::measure::{kappa, MeasureData};
use crate::solver::{assemble, solve, ProblemSpec, SolveMode, SolveReport};

#[derive(Clone, Debug)]
pub struct ChainConfig {
    pub tau0: f64,
    pub sigma: f64,
    pub beta: f64,
    /// Flatness / smallness level used for the geometric setting and the
    /// frozen-stage bound.
    pub delta: f64,
    pub big_r: f64,
    pub r0: Option<f64>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            tau0: 0.1,
            sigma: 0.05,
            beta: 0.5,
            delta: 0.1,
            big_r: 0.5,
            r0: None,
        }
    }
}

/// `Omega_{8r}(x0)` for a boundary point `x0` with everything the comparison
/// stages need.
#[derive(Clone, Debug)]
pub struct ComparisonWindow {
    pub center: Point,
    pub r: f64,
    pub outer: SubWindow,
    pub p0: f64,
    pub p1: f64,
    pub p2: f64,
    pub p0_below_2: bool,
    pub kappa: f64,
    pub psi1_mass: f64,
    pub psi2_mass: f64,
    pub area: f64,
    pub r0: R0Report,
    /// Step-2 scaling factor (the c-free u -> z bound).
    pub scaling: f64,
    /// `r <= R_0 / 8`.
    pub radius_ok: bool,
    /// `R_0 <= min{R/2, 1/M, 1/4, 1/(2 M_1)}`.
    pub hi1_ok: bool,
    /// `p2 - p1 <= omega(16 r) <= omega(2 R_0) <= min{1/(2n), Lambda_2/(2 Lambda_1), tau_0/4}`.
    pub bc_ok: bool,
    pub oscillation_ok: bool,
    pub geometric: bool,
}

impl ComparisonWindow {
    pub fn admissible(&self) -> bool {
        self.oscillation_ok && self.geometric
    }
}

fn r_pow(grid: &Grid, r: f64) -> f64 {
    r.powi(grid.dim as i32 - 1)
}

/// c-free comparison bound `[X / r^{n-1}]^{1/(p0-1)} + chi X / r^{n-1} * avg^{2-p0}`.
fn comparison_bound(grid: &Grid, w: &ComparisonWindow, x: f64, avg: f64) -> f64 {
    let s = x / r_pow(grid, w.r);
    let mut b = s.powf(1.0 / (w.p0 - 1.0));
    if w.p0_below_2 {
        b += s * avg.powf(2.0 - w.p0);
    }
    b
}

pub fn build_window(
    inst: &Instance,
    u: &GridFunction,
    mu: &MeasureData,
    x0: Point,
    r: f64,
    cfg: &ChainConfig,
) -> Result<ComparisonWindow> {
    let grid = &inst.grid;
    if !(r > 0.0) {
        return Err(LabError::InvalidArgument(format!("window radius r = {r} must be positive")));
    }
    if 8.0 * r >= grid.diameter() {
        return Err(LabError::InvalidArgument(format!(
            "window Omega_8r with r = {r} escapes the grid (domain diameter {})",
            grid.diameter()
        )));
    }
    let node = grid
        .nearest_node(x0)
        .filter(|&k| dist(grid.coords[k], x0) < 1e-9 * grid.h && grid.flags[k] == NodeFlag::Dirichlet)
        .ok_or_else(|| {
            LabError::Precondition(format!("window center ({}, {}) is not a boundary node", x0[0], x0[1]))
        })?;
    let x0 = grid.coords[node];
    let outer = window(grid, x0, 8.0 * r)?;
    let p0 = inst.flux.exponent.eval(x0);
    let (p1, p2) = inst.flux.exponent.range_on(grid, &outer.nodes, &outer.cells);
    let (p1, p2) = (p1.min(p0), p2.max(p0));
    let r0 = select_r0(inst, u, mu, cfg.big_r, cfg.tau0, cfg.r0)?;
    let psi1_mass = inst.div_psi1.cells.abs_integral_on(grid, &outer.cells);
    let psi2_mass = inst.div_psi2.cells.abs_integral_on(grid, &outer.cells);
    let kap = kappa(mu, grid, &outer.cells);
    let area = outer.area(grid);
    let omega = |t: f64| inst.flux.exponent.modulus(t);
    let n = grid.dim as f64;
    let hi1_cap = [cfg.big_r / 2.0, 1.0 / r0.m, 0.25, 1.0 / (2.0 * r0.m1)]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let oscillation_ok = p2 - p1 <= omega(16.0 * r) + 1e-12;
    let bc_ok = oscillation_ok
        && omega(16.0 * r) <= omega(2.0 * r0.r0)
        && omega(2.0 * r0.r0) <= (1.0 / (2.0 * n)).min(inst.flux.lambda2 / (2.0 * inst.flux.lambda1)).min(cfg.tau0 / 4.0);
    let mut w = ComparisonWindow {
        center: x0,
        r,
        p0,
        p1,
        p2,
        p0_below_2: p0 < 2.0,
        kappa: kap,
        psi1_mass,
        psi2_mass,
        area,
        radius_ok: r <= r0.r0 / 8.0,
        hi1_ok: r0.r0 <= hi1_cap,
        bc_ok,
        oscillation_ok,
        geometric: outer.geometric_setting(cfg.delta),
        outer,
        r0,
        scaling: 0.0,
    };
    let du_avg = grad_diff_power_integral(grid, u, None, Some(&grid.cell_mask(&w.outer.cells)), |_| 1.0) / area;
    w.scaling = comparison_bound(grid, &w, kap + psi2_mass, du_avg);
    Ok(w)
}

#[derive(Clone, Debug)]
pub struct RatioRow {
    pub stage: &'static str,
    pub r: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    /// `zero_rhs`, `observation`, `degenerate` or empty.
    pub flag: &'static str,
}

impl RatioRow {
    fn new(stage: &'static str, r: f64, lhs: f64, rhs: f64) -> Self {
        let (ratio, flag) = if rhs > 0.0 && rhs.is_finite() {
            (lhs / rhs, "")
        } else {
            (f64::NAN, "zero_rhs")
        };
        RatioRow {
            stage,
            r,
            lhs,
            rhs,
            ratio,
            flag,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChainResult {
    pub z: GridFunction,
    pub h: GridFunction,
    pub w: GridFunction,
    pub v: Option<GridFunction>,
    pub vbar: Option<GridFunction>,
    pub frozen: Option<FrozenFlux>,
    pub reports: Vec<(&'static str, SolveReport)>,
    /// Each stage's Dirichlet nodes carry the previous stage's values exactly.
    pub boundary_consistent: bool,
    /// `max (z - psi_2)^+` over the window nodes.
    pub z_above_upper: f64,
    /// Why the frozen stages were skipped, if they were.
    pub frozen_skipped: Option<String>,
}

struct Stage<'a> {
    name: &'static str,
    coeffs: &'a dyn Coefficients,
    mode: SolveMode,
    lower: Option<&'a GridFunction>,
    boundary: &'a GridFunction,
    div_source: Option<&'a GridFunction>,
    cells: &'a [usize],
}

fn run_stage(inst: &Instance, st: Stage<'_>) -> Result<(GridFunction, SolveReport, bool)> {
    let mut spec = ProblemSpec::new(&inst.grid, st.coeffs, st.boundary);
    spec.mode = st.mode;
    spec.lower = st.lower;
    spec.div_source = st.div_source;
    spec.cells = Some(st.cells);
    let vi = assemble(&spec).map_err(|e| e.in_stage(st.name))?;
    let (sol, report) = solve(&vi, &inst.options).map_err(|e| e.in_stage(st.name))?;
    let consistent = vi.dirichlet.iter().all(|&k| sol.values[k] == st.boundary.values[k]);
    Ok((sol, report, consistent))
}

/// Solves `z`, `h`, `w` on `Omega_{8r}`, then the frozen problems for `v` on
/// `Omega_{3r}` and `vbar` on `B_{2r}^+`. The frozen stages are skipped (and
/// the reason recorded) when the window has no flat half-space template or the
/// exponent oscillates too much.
pub fn solve_chain(inst: &Instance, u: &GridFunction, win: &ComparisonWindow) -> Result<ChainResult> {
    let grid = &inst.grid;
    let cells8 = &win.outer.cells;
    let mut reports = Vec::new();
    let (z, rz, cz) = run_stage(
        inst,
        Stage {
            name: "z",
            coeffs: &inst.flux,
            mode: SolveMode::LowerObstacle,
            lower: Some(&inst.lower),
            boundary: u,
            div_source: Some(&inst.upper),
            cells: cells8,
        },
    )?;
    reports.push(("z", rz));
    let (h, rh, ch) = run_stage(
        inst,
        Stage {
            name: "h",
            coeffs: &inst.flux,
            mode: SolveMode::Equation,
            lower: None,
            boundary: &z,
            div_source: Some(&inst.lower),
            cells: cells8,
        },
    )?;
    reports.push(("h", rh));
    let (w, rw, cw) = run_stage(
        inst,
        Stage {
            name: "w",
            coeffs: &inst.flux,
            mode: SolveMode::Equation,
            lower: None,
            boundary: &h,
            div_source: None,
            cells: cells8,
        },
    )?;
    reports.push(("w", rw));
    let mut consistent = cz && ch && cw;
    let z_above_upper = win
        .outer
        .nodes
        .iter()
        .map(|&k| (z.values[k] - inst.upper.values[k]).max(0.0))
        .fold(0.0, f64::max);

    let frozen = match freeze_flux(&inst.flux, grid, &win.outer) {
        Ok(f) => f,
        Err(e @ (LabError::Precondition(_) | LabError::ExponentOscillation { .. })) => {
            return Ok(ChainResult {
                z,
                h,
                w,
                v: None,
                vbar: None,
                frozen: None,
                reports,
                boundary_consistent: consistent,
                z_above_upper,
                frozen_skipped: Some(e.to_string()),
            });
        }
        Err(e) => return Err(e.in_stage("v")),
    };
    let cells3 = grid.cells_in_ball(win.center, 3.0 * win.r);
    let (v, rv, cv) = run_stage(
        inst,
        Stage {
            name: "v",
            coeffs: &frozen,
            mode: SolveMode::Equation,
            lower: None,
            boundary: &w,
            div_source: None,
            cells: &cells3,
        },
    )?;
    reports.push(("v", rv));
    consistent &= cv;

    let nu = win.outer.normal.expect("frozen flux requires a normal");
    let upper2 = win.outer.upper_cells(grid, 2.0 * win.r);
    let side = |p: Point| (p[0] - win.center[0]) * nu[0] + (p[1] - win.center[1]) * nu[1];
    let trace = GridFunction {
        values: (0..grid.node_count())
            .map(|k| if side(grid.coords[k]) > 1e-12 { v.values[k] } else { 0.0 })
            .collect(),
    };
    let vbar = if upper2.is_empty() {
        None
    } else {
        let (vb, rb, _) = run_stage(
            inst,
            Stage {
                name: "vbar",
                coeffs: &frozen,
                mode: SolveMode::Equation,
                lower: None,
                boundary: &trace,
                div_source: None,
                cells: &upper2,
            },
        )?;
        reports.push(("vbar", rb));
        // Zero extension below the flat part and outside B_{2r}^+.
        let mut touched = vec![false; grid.node_count()];
        for &c in &upper2 {
            for &k in &grid.cells[c].corners {
                touched[k] = true;
            }
        }
        Some(GridFunction {
            values: vb
                .values
                .iter()
                .enumerate()
                .map(|(k, &x)| if touched[k] && side(grid.coords[k]) > 1e-12 { x } else { 0.0 })
                .collect(),
        })
    };
    Ok(ChainResult {
        z,
        h,
        w,
        v: Some(v),
        vbar,
        frozen: Some(frozen),
        reports,
        boundary_consistent: consistent,
        z_above_upper,
        frozen_skipped: None,
    })
}

fn avg_power(grid: &Grid, a: &GridFunction, b: Option<&GridFunction>, cells: &[usize], q: impl Fn(Point) -> f64) -> f64 {
    let area = grid.cells_area(cells);
    if area == 0.0 {
        return 0.0;
    }
    grad_diff_power_integral(grid, a, b, Some(&grid.cell_mask(cells)), q) / area
}

/// `(stage, r, LHS, RHS, ratio, flag)` rows for every comparison of the chain.
pub fn comparison_metrics(
    inst: &Instance,
    u: &GridFunction,
    win: &ComparisonWindow,
    chain: &ChainResult,
    cfg: &ChainConfig,
) -> Vec<RatioRow> {
    let grid = &inst.grid;
    let c8 = &win.outer.cells;
    let one = |_: Point| 1.0;
    let mut rows = Vec::new();

    let uz = avg_power(grid, u, Some(&chain.z), c8, one);
    rows.push(RatioRow::new("u_z", win.r, uz, win.scaling));
    if inst.p_minus() >= 2.0 {
        let pe = |x: Point| inst.flux.exponent.eval(x);
        let psi2 = avg_power(grid, &inst.upper, None, c8, pe).powf(1.0 / win.p0);
        let rhs = (win.kappa / r_pow(grid, win.r)).powf(1.0 / (win.p0 - 1.0)) + psi2;
        rows.push(RatioRow::new("u_z_p_ge_2", win.r, uz, rhs));
    }
    let zh = avg_power(grid, &chain.z, Some(&chain.h), c8, one);
    let dz = avg_power(grid, &chain.z, None, c8, one);
    rows.push(RatioRow::new(
        "z_h",
        win.r,
        zh,
        comparison_bound(grid, win, win.area + win.psi1_mass + win.psi2_mass, dz),
    ));
    let hw = avg_power(grid, &chain.h, Some(&chain.w), c8, one);
    let dh = avg_power(grid, &chain.h, None, c8, one);
    rows.push(RatioRow::new("h_w", win.r, hw, comparison_bound(grid, win, win.area + win.psi1_mass, dh)));

    if let (Some(v), Some(frozen)) = (&chain.v, &chain.frozen) {
        let p2 = frozen.p2;
        let c3 = grid.cells_in_ball(win.center, 3.0 * win.r);
        let lhs = avg_power(grid, &chain.w, Some(v), &c3, |_| p2).powf(1.0 / p2);
        let dw = avg_power(grid, &chain.w, None, c8, one);
        let rhs = (cfg.delta.powf(cfg.tau0 / (4.0 + cfg.tau0)) * (dw.powf(p2) + 1.0)).powf(1.0 / p2);
        rows.push(RatioRow::new("w_v", win.r, lhs, rhs));
        if let Some(vb) = &chain.vbar {
            let up1 = win.outer.upper_cells(grid, win.r);
            let up2 = win.outer.upper_cells(grid, 2.0 * win.r);
            let sup = if up1.is_empty() { 0.0 } else { grad_sup(grid, vb, &grid.cell_mask(&up1)) };
            let avg = avg_power(grid, vb, None, &up2, one);
            let mut row = RatioRow::new("vbar_lipschitz", win.r, sup, avg);
            if up1.is_empty() {
                row.flag = "degenerate";
            }
            rows.push(row);
            let c2 = grid.cells_in_ball(win.center, 2.0 * win.r);
            let diff = avg_power(grid, v, Some(vb), &c2, |_| p2);
            let dv = avg_power(grid, v, None, &c3, |_| p2);
            let mut row = RatioRow::new("v_vbar", win.r, diff, dv);
            row.flag = if row.flag.is_empty() { "observation" } else { row.flag };
            rows.push(row);
        }
    }
    rows
}

#[derive(Clone, Debug)]
pub struct HigherIntegrability {
    pub rho: f64,
    pub sigma: f64,
    pub beta: f64,
    /// `(avg_{Omega_rho} |Dw|^{p(x)(1+sigma)})^{1/(1+sigma)}`.
    pub lhs: f64,
    /// `(avg_{Omega_{2 rho}} |Dw|^{p(x) beta})^{1/beta} + 1`.
    pub rhs: f64,
    pub ratio: f64,
    /// `avg_{Omega_{3r}} |Dw|^{p2}`.
    pub moment_lhs: f64,
    /// `(avg_{Omega_{8r}} |Dw|)^{p2} + 1`.
    pub moment_rhs: f64,
    pub moment_ratio: f64,
}

/// Reverse Hoelder check for `w` on `Omega_rho ⊂ Omega_{2 rho} ⊂ Omega_{8r}`.
pub fn higher_integrability_check(
    inst: &Instance,
    w: &GridFunction,
    win: &ComparisonWindow,
    sigma: f64,
    beta: f64,
    tau0: f64,
    rho: f64,
) -> Result<HigherIntegrability> {
    if !(sigma > 0.0 && sigma <= tau0) {
        return Err(LabError::InvalidArgument(format!("sigma = {sigma} must lie in (0, tau_0 = {tau0}]")));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(LabError::InvalidArgument(format!("beta = {beta} must lie in (0, 1]")));
    }
    if !(rho > 0.0 && rho <= 4.0 * win.r) {
        return Err(LabError::InvalidArgument(format!("rho = {rho} must lie in (0, 4r]")));
    }
    let grid = &inst.grid;
    let p = |x: Point| inst.flux.exponent.eval(x);
    let inner = grid.cells_in_ball(win.center, rho);
    let outer = grid.cells_in_ball(win.center, 2.0 * rho);
    let lhs = avg_power(grid, w, None, &inner, |x| p(x) * (1.0 + sigma)).powf(1.0 / (1.0 + sigma));
    let rhs = avg_power(grid, w, None, &outer, |x| p(x) * beta).powf(1.0 / beta) + 1.0;
    let c3 = grid.cells_in_ball(win.center, 3.0 * win.r);
    let moment_lhs = avg_power(grid, w, None, &c3, |_| win.p2);
    let moment_rhs = avg_power(grid, w, None, &win.outer.cells, |_| 1.0).powf(win.p2) + 1.0;
    Ok(HigherIntegrability {
        rho,
        sigma,
        beta,
        lhs,
        rhs,
        ratio: lhs / rhs,
        moment_lhs,
        moment_rhs,
        moment_ratio: moment_lhs / moment_rhs,
    })
}
