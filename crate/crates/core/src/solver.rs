//! Discrete energies and the projected nonlinear Gauss-Seidel solver for
//! double obstacle, lower obstacle and plain equation problems.

use std::time::Instant;

use crate::error::{LabError, Result};
use crate::exponent::{flux_kernel, Coefficients, ExponentField};
use crate::field::{element_gradient, norm, GridFunction};
use crate::grid::{Grid, NodeFlag};
use crate::maximal::{phi_trunc, truncate};
use crate::measure::MeasureData;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMode {
    Double,
    LowerObstacle,
    Equation,
}

/// How atoms are turned into nodal loads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LoadRule {
    /// Whole weight on the nearest node (ties to the lower index).
    #[default]
    Nearest,
    /// Bilinear (1-D: linear) hat weights of the containing cell.
    Hat,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Relaxation {
    Fixed(f64),
    /// `2 / (1 + sin(pi h))`.
    Auto,
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_sweeps: usize,
    pub relaxation: Relaxation,
    /// Recompute the full energy after every sweep and track the drift
    /// against the accumulated trace.
    pub audit: bool,
    /// Record the complementarity residual after every sweep.
    pub residual_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-9,
            max_sweeps: 100_000,
            relaxation: Relaxation::Fixed(1.0),
            audit: false,
            residual_trace: false,
        }
    }
}

impl SolverOptions {
    pub fn accelerated() -> Self {
        SolverOptions {
            relaxation: Relaxation::Auto,
            ..Self::default()
        }
    }
}

pub struct ProblemSpec<'a> {
    pub grid: &'a Grid,
    pub coeffs: &'a dyn Coefficients,
    pub mode: SolveMode,
    pub lower: Option<&'a GridFunction>,
    pub upper: Option<&'a GridFunction>,
    /// Dirichlet values; also the starting guess on free nodes unless
    /// `initial` is given.
    pub boundary: &'a GridFunction,
    pub initial: Option<&'a GridFunction>,
    pub measure: Option<&'a MeasureData>,
    pub load_rule: LoadRule,
    /// `psi` of a divergence-form source `div a(D psi, .)`, paired weakly.
    pub div_source: Option<&'a GridFunction>,
    /// Active cells making up the subdomain; the whole grid if `None`.
    pub cells: Option<&'a [usize]>,
}

impl<'a> ProblemSpec<'a> {
    pub fn new(grid: &'a Grid, coeffs: &'a dyn Coefficients, boundary: &'a GridFunction) -> Self {
        ProblemSpec {
            grid,
            coeffs,
            mode: SolveMode::Equation,
            lower: None,
            upper: None,
            boundary,
            initial: None,
            measure: None,
            load_rule: LoadRule::Nearest,
            div_source: None,
            cells: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ElementData {
    /// `weight * gamma`.
    wg: f64,
    p: f64,
    eps2: f64,
    /// `weight * source flux`.
    src: [f64; 2],
    gx: (usize, usize),
    gy: Option<(usize, usize)>,
}

/// Assembled discrete variational inequality.
pub struct DiscreteVI {
    pub n_nodes: usize,
    pub h: f64,
    elements: Vec<ElementData>,
    /// Free nodes in lexicographic order.
    pub free: Vec<usize>,
    /// Per free node: `(element, dgrad/du_j)`.
    adjacency: Vec<Vec<(usize, [f64; 2])>>,
    linear: Vec<bool>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub loads: Vec<f64>,
    pub start: GridFunction,
    pub dirichlet: Vec<usize>,
    pub node_area: Vec<f64>,
}

pub fn measure_loads(grid: &Grid, mu: &MeasureData, rule: LoadRule) -> Vec<f64> {
    let mut loads = vec![0.0; grid.node_count()];
    for a in &mu.atoms {
        match rule {
            LoadRule::Nearest => {
                if let Some(k) = grid.nearest_node(a.x) {
                    loads[k] += a.w;
                }
            }
            LoadRule::Hat => {
                if let Some(c) = MeasureData::atom_cell(grid, a) {
                    let cell = &grid.cells[c];
                    let tx = ((a.x[0] - cell.lo[0]) / grid.h).clamp(0.0, 1.0);
                    if grid.dim == 1 {
                        loads[cell.corners[0]] += a.w * (1.0 - tx);
                        loads[cell.corners[1]] += a.w * tx;
                    } else {
                        let ty = ((a.x[1] - cell.lo[1]) / grid.h).clamp(0.0, 1.0);
                        let wts = [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty];
                        for (k, w) in cell.corners.iter().zip(wts) {
                            loads[*k] += a.w * w;
                        }
                    }
                }
            }
        }
    }
    if let Some(d) = &mu.density {
        for (cell, v) in grid.cells.iter().zip(&d.values) {
            let share = v * cell.area / cell.corners.len() as f64;
            for &k in &cell.corners {
                loads[k] += share;
            }
        }
    }
    loads
}

pub fn assemble(spec: &ProblemSpec<'_>) -> Result<DiscreteVI> {
    let grid = spec.grid;
    let n = grid.node_count();
    let cells: Vec<usize> = match spec.cells {
        Some(c) => c.to_vec(),
        None => (0..grid.cell_count()).collect(),
    };
    let in_sub = grid.cell_mask(&cells);
    let eps2 = spec.coeffs.eps_reg() * spec.coeffs.eps_reg();

    let mut elements = Vec::with_capacity(cells.len() * 4);
    for &c in &cells {
        let (gamma, p) = spec.coeffs.at(grid.cells[c].center);
        for e in grid.elements_of_cell(c) {
            let src = match spec.div_source {
                Some(psi) => {
                    let g = element_gradient(grid, e, &psi.values);
                    let a = flux_kernel(gamma, p, eps2, g);
                    [e.weight * a[0], e.weight * a[1]]
                }
                None => [0.0, 0.0],
            };
            elements.push(ElementData {
                wg: e.weight * gamma,
                p,
                eps2,
                src,
                gx: e.gx,
                gy: e.gy,
            });
        }
    }

    // Free: interior grid nodes whose incident lattice cells all belong to
    // the subdomain. Dirichlet: remaining nodes touched by the subdomain.
    let mut touched = vec![false; n];
    for &c in &cells {
        for &k in &grid.cells[c].corners {
            touched[k] = true;
        }
    }
    let per_node = if grid.dim == 1 { 2 } else { 4 };
    let mut free = Vec::new();
    let mut dirichlet = Vec::new();
    for k in 0..n {
        if !touched[k] {
            continue;
        }
        let inner = grid.flags[k] == NodeFlag::Interior
            && grid.node_cells(k).len() == per_node
            && grid.node_cells(k).iter().all(|&c| in_sub[c]);
        if inner {
            free.push(k);
        } else {
            dirichlet.push(k);
        }
    }

    let mut index = vec![usize::MAX; n];
    for (slot, &k) in free.iter().enumerate() {
        index[k] = slot;
    }
    let inv = 1.0 / grid.h;
    let mut adjacency: Vec<Vec<(usize, [f64; 2])>> = vec![Vec::new(); free.len()];
    for (ei, e) in elements.iter().enumerate() {
        let mut add = |k: usize, d: [f64; 2]| {
            if index[k] != usize::MAX {
                let list = &mut adjacency[index[k]];
                match list.iter_mut().find(|x| x.0 == ei) {
                    Some(x) => {
                        x.1[0] += d[0];
                        x.1[1] += d[1];
                    }
                    None => list.push((ei, d)),
                }
            }
        };
        add(e.gx.0, [-inv, 0.0]);
        add(e.gx.1, [inv, 0.0]);
        if let Some((a, b)) = e.gy {
            add(a, [0.0, -inv]);
            add(b, [0.0, inv]);
        }
    }
    let linear = adjacency
        .iter()
        .map(|l| l.iter().all(|&(e, _)| elements[e].p == 2.0))
        .collect();

    let (use_lo, use_hi) = match spec.mode {
        SolveMode::Double => (true, true),
        SolveMode::LowerObstacle => (true, false),
        SolveMode::Equation => (false, false),
    };
    let mut lo = vec![f64::NEG_INFINITY; n];
    let mut hi = vec![f64::INFINITY; n];
    if use_lo {
        let l = spec
            .lower
            .ok_or_else(|| LabError::InvalidArgument("obstacle mode requires a lower obstacle".into()))?;
        lo.copy_from_slice(&l.values);
    }
    if use_hi {
        let u = spec
            .upper
            .ok_or_else(|| LabError::InvalidArgument("double obstacle mode requires an upper obstacle".into()))?;
        hi.copy_from_slice(&u.values);
    }
    for &k in &free {
        if lo[k] > hi[k] {
            return Err(LabError::InfeasibleBox {
                node: k,
                lower: lo[k],
                upper: hi[k],
            });
        }
    }
    let btol = 1e-12;
    for &k in &dirichlet {
        let v = spec.boundary.values[k];
        if v < lo[k] - btol * (1.0 + lo[k].abs()) || v > hi[k] + btol * (1.0 + hi[k].abs()) {
            return Err(LabError::BoundaryOutsideBox {
                node: k,
                value: v,
                lower: lo[k],
                upper: hi[k],
            });
        }
    }

    let mut loads = match spec.measure {
        Some(mu) => measure_loads(grid, mu, spec.load_rule),
        None => vec![0.0; n],
    };
    let mut is_free = vec![false; n];
    for &k in &free {
        is_free[k] = true;
    }
    for (k, l) in loads.iter_mut().enumerate() {
        if !is_free[k] {
            *l = 0.0;
        }
    }

    let mut start = spec.boundary.clone();
    if let Some(init) = spec.initial {
        for &k in &free {
            start.values[k] = init.values[k];
        }
    }
    for &k in &free {
        start.values[k] = start.values[k].clamp(lo[k], hi[k]);
    }
    let node_area = (0..n).map(|k| grid.node_area(k)).collect();

    Ok(DiscreteVI {
        n_nodes: n,
        h: grid.h,
        elements,
        free,
        adjacency,
        linear,
        lo,
        hi,
        loads,
        start,
        dirichlet,
        node_area,
    })
}

#[inline]
fn grad(e: &ElementData, u: &[f64], inv: f64) -> [f64; 2] {
    let gx = (u[e.gx.1] - u[e.gx.0]) * inv;
    let gy = match e.gy {
        Some((a, b)) => (u[b] - u[a]) * inv,
        None => 0.0,
    };
    [gx, gy]
}

#[inline]
fn density(e: &ElementData, g: [f64; 2]) -> f64 {
    let s = g[0] * g[0] + g[1] * g[1] + e.eps2;
    let pot = if e.p == 2.0 { s } else { s.powf(0.5 * e.p) };
    e.wg / e.p * pot - (e.src[0] * g[0] + e.src[1] * g[1])
}

impl DiscreteVI {
    /// Full discrete energy.
    pub fn energy(&self, u: &GridFunction) -> f64 {
        let inv = 1.0 / self.h;
        let bulk: f64 = self.elements.iter().map(|e| density(e, grad(e, &u.values, inv))).sum();
        let load: f64 = self.loads.iter().zip(&u.values).map(|(l, v)| l * v).sum();
        bulk - load
    }

    /// `(f'(delta), f''(delta))` of the restriction to free node `slot`.
    fn local_derivatives(&self, u: &[f64], slot: usize, delta: f64) -> (f64, f64) {
        let inv = 1.0 / self.h;
        let mut d1 = -self.loads[self.free[slot]];
        let mut d2 = 0.0;
        for &(ei, d) in &self.adjacency[slot] {
            let e = &self.elements[ei];
            let g0 = grad(e, u, inv);
            let g = [g0[0] + delta * d[0], g0[1] + delta * d[1]];
            let s = g[0] * g[0] + g[1] * g[1] + e.eps2;
            let gd = g[0] * d[0] + g[1] * d[1];
            let dd = d[0] * d[0] + d[1] * d[1];
            let sd = e.src[0] * d[0] + e.src[1] * d[1];
            if e.p == 2.0 {
                d1 += e.wg * gd - sd;
                d2 += e.wg * dd;
            } else if s > 0.0 {
                let f = s.powf(0.5 * (e.p - 2.0));
                d1 += e.wg * f * gd - sd;
                d2 += e.wg * f * (dd + (e.p - 2.0) * gd * gd / s);
            } else {
                d1 -= sd;
                d2 = f64::INFINITY;
            }
        }
        (d1, d2)
    }

    /// `f(delta) - f(0)` of the restriction to free node `slot`.
    fn local_change(&self, u: &[f64], slot: usize, delta: f64) -> f64 {
        let inv = 1.0 / self.h;
        let mut total = -self.loads[self.free[slot]] * delta;
        for &(ei, d) in &self.adjacency[slot] {
            let e = &self.elements[ei];
            let g0 = grad(e, u, inv);
            let g1 = [g0[0] + delta * d[0], g0[1] + delta * d[1]];
            let s0 = g0[0] * g0[0] + g0[1] * g0[1] + e.eps2;
            let s1 = g1[0] * g1[0] + g1[1] * g1[1] + e.eps2;
            let bulk = if e.p == 2.0 {
                s1 - s0
            } else {
                s1.powf(0.5 * e.p) - s0.powf(0.5 * e.p)
            };
            total += e.wg / e.p * bulk - delta * (e.src[0] * d[0] + e.src[1] * d[1]);
        }
        total
    }

    /// Unconstrained minimizer of the 1-D restriction (as an increment).
    fn local_minimizer(&self, u: &[f64], slot: usize) -> f64 {
        let (f0, s0) = self.local_derivatives(u, slot, 0.0);
        if f0 == 0.0 {
            return 0.0;
        }
        if self.linear[slot] {
            return -f0 / s0;
        }
        let dir = -f0.signum();
        let scale = self.h * (1.0 + u[self.free[slot]].abs());
        let mut step = if s0.is_finite() && s0 > 0.0 { (f0 / s0).abs() } else { 1e-3 * scale };
        if !(step > 0.0) || !step.is_finite() {
            step = 1e-3 * scale;
        }
        // Bracket the sign change of f' on the descent side.
        let (mut a, mut fa) = (0.0f64, f0);
        let mut b = dir * step;
        let mut fb = self.local_derivatives(u, slot, b).0;
        let mut grow = 0;
        while fb.signum() == fa.signum() && fb != 0.0 {
            a = b;
            fa = fb;
            b *= 2.0;
            fb = self.local_derivatives(u, slot, b).0;
            grow += 1;
            if grow > 400 || !b.is_finite() {
                return a;
            }
        }
        if fb == 0.0 {
            return b;
        }
        // Safeguarded Newton inside [a, b].
        let mut x = 0.5 * (a + b);
        for _ in 0..200 {
            let (fx, sx) = self.local_derivatives(u, slot, x);
            if fx == 0.0 {
                return x;
            }
            if fx.signum() == fa.signum() {
                a = x;
                fa = fx;
            } else {
                b = x;
            }
            let newton = x - fx / sx;
            let lo = a.min(b);
            let hi = a.max(b);
            let next = if sx.is_finite() && sx > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (a + b)
            };
            if (next - x).abs() <= 4.0 * f64::EPSILON * next.abs().max(x.abs()).max(f64::MIN_POSITIVE)
                || (hi - lo) <= 4.0 * f64::EPSILON * hi.abs().max(lo.abs())
            {
                return next;
            }
            x = next;
        }
        x
    }

    /// `dE/du_j` at each free node.
    pub fn gradient(&self, u: &GridFunction) -> Vec<f64> {
        (0..self.free.len())
            .map(|s| self.local_derivatives(&u.values, s, 0.0).0)
            .collect()
    }

    pub fn complementarity_residual(&self, u: &GridFunction) -> f64 {
        let mut r = 0.0f64;
        for (slot, &k) in self.free.iter().enumerate() {
            let d = self.local_derivatives(&u.values, slot, 0.0).0;
            let v = u.values[k];
            let term = if v <= self.lo[k] && v >= self.hi[k] {
                0.0
            } else if v <= self.lo[k] {
                d.max(0.0)
            } else if v >= self.hi[k] {
                (-d).max(0.0)
            } else {
                d.abs()
            };
            r = r.max(term);
        }
        r
    }

    pub fn is_feasible(&self, u: &GridFunction, tol: f64) -> bool {
        self.free
            .iter()
            .all(|&k| u.values[k] >= self.lo[k] - tol && u.values[k] <= self.hi[k] + tol)
    }
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub sweeps: usize,
    pub converged: bool,
    pub final_update: f64,
    pub energy: f64,
    /// Energy before the first sweep followed by the energy after each sweep.
    pub energies: Vec<f64>,
    pub residual: f64,
    pub residuals: Vec<f64>,
    pub active_lower: usize,
    pub active_upper: usize,
    /// Largest gap between the accumulated trace and a full recomputation.
    pub audit_drift: Option<f64>,
    pub omega: f64,
    pub wall_seconds: f64,
}

pub fn solve(vi: &DiscreteVI, opts: &SolverOptions) -> Result<(GridFunction, SolveReport)> {
    let started = Instant::now();
    let omega = match opts.relaxation {
        Relaxation::Fixed(w) => w,
        Relaxation::Auto => 2.0 / (1.0 + (std::f64::consts::PI * vi.h).sin()),
    };
    if !(omega > 0.0 && omega < 2.0) {
        return Err(LabError::InvalidArgument(format!("relaxation factor {omega} must lie in (0, 2)")));
    }
    let mut u = vi.start.clone();
    let mut energy = vi.energy(&u);
    if !energy.is_finite() {
        return Err(LabError::NonFiniteEnergy { sweep: 0 });
    }
    let mut energies = vec![energy];
    let mut residuals = Vec::new();
    let mut drift: Option<f64> = opts.audit.then_some(0.0);
    let mut sweeps = 0;
    let mut update = f64::INFINITY;
    let mut converged = false;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut change = 0.0;
        update = 0.0f64;
        for slot in 0..vi.free.len() {
            let k = vi.free[slot];
            let old = u.values[k];
            let delta = vi.local_minimizer(&u.values, slot);
            let plain = (old + delta).clamp(vi.lo[k], vi.hi[k]) - old;
            let mut accepted = None;
            if omega != 1.0 {
                let relaxed = (old + omega * delta).clamp(vi.lo[k], vi.hi[k]) - old;
                let d = vi.local_change(&u.values, slot, relaxed);
                if d <= 0.0 {
                    accepted = Some((relaxed, d));
                }
            }
            if accepted.is_none() {
                let d = vi.local_change(&u.values, slot, plain);
                if d <= 0.0 {
                    accepted = Some((plain, d));
                }
            }
            if let Some((step, d)) = accepted {
                u.values[k] = old + step;
                change += d;
                update = update.max((u.values[k] - old).abs());
            }
        }
        energy += change;
        if !energy.is_finite() {
            return Err(LabError::NonFiniteEnergy { sweep: sweeps });
        }
        energies.push(energy);
        if let Some(dr) = drift.as_mut() {
            let full = vi.energy(&u);
            *dr = dr.max((full - energy).abs());
        }
        if opts.residual_trace {
            residuals.push(vi.complementarity_residual(&u));
        }
        if update < opts.tol {
            converged = true;
            break;
        }
    }
    let residual = vi.complementarity_residual(&u);
    let active_lower = vi.free.iter().filter(|&&k| u.values[k] <= vi.lo[k]).count();
    let active_upper = vi.free.iter().filter(|&&k| u.values[k] >= vi.hi[k]).count();
    let report = SolveReport {
        sweeps,
        converged,
        final_update: update,
        energy,
        energies,
        residual,
        residuals,
        active_lower,
        active_upper,
        audit_drift: drift,
        omega,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((u, report))
}

/// Assemble and solve in one call.
pub fn solve_problem(spec: &ProblemSpec<'_>, opts: &SolverOptions) -> Result<(GridFunction, SolveReport)> {
    solve(&assemble(spec)?, opts)
}

#[derive(Clone, Debug)]
pub struct TruncationRow {
    pub k: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    /// Same with `Phi_k` in place of `T_k` (band `k <= |u - g| < k + 1`).
    pub band_lhs: f64,
    pub band_rhs: f64,
    pub band_ratio: f64,
}

/// Truncated energies of `u - g` against `k K + int |Dg|^p`.
pub fn truncation_energy_check(
    grid: &Grid,
    exponent: &ExponentField,
    u: &GridFunction,
    g: &GridFunction,
    k_list: &[f64],
    big_k: f64,
) -> Result<Vec<TruncationRow>> {
    let p = |x| exponent.eval(x);
    let g_energy = crate::field::grad_power_integral(grid, g, None, p);
    k_list
        .iter()
        .map(|&k| {
            if !(k > 0.0) {
                return Err(LabError::InvalidArgument(format!("truncation level {k} must be positive")));
            }
            let diff: Vec<f64> = u.values.iter().zip(&g.values).map(|(a, b)| a - b).collect();
            let tk = GridFunction {
                values: diff.iter().map(|&d| truncate(d, k)).collect(),
            };
            let band = GridFunction {
                values: diff.iter().map(|&d| phi_trunc(d, k)).collect(),
            };
            let lhs = crate::field::grad_power_integral(grid, &tk, None, p);
            let band_lhs = crate::field::grad_power_integral(grid, &band, None, p);
            let rhs = k * big_k + g_energy;
            let band_rhs = big_k + g_energy;
            let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else if a == 0.0 { 0.0 } else { f64::INFINITY };
            Ok(TruncationRow {
                k,
                lhs,
                rhs,
                ratio: ratio(lhs, rhs),
                band_lhs,
                band_rhs,
                band_ratio: ratio(band_lhs, band_rhs),
            })
        })
        .collect()
}

/// Largest element gradient of a solution over the subdomain cells.
pub fn sup_gradient(grid: &Grid, u: &GridFunction, cells: &[usize]) -> f64 {
    cells
        .iter()
        .flat_map(|&c| grid.elements_of_cell(c).iter())
        .map(|e| norm(element_gradient(grid, e, &u.values)))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exponent::Flux;
    use crate::grid::{build_grid, DomainKind};

    fn green(x: f64) -> f64 {
        if x <= 0.5 {
            0.5 * x
        } else {
            0.5 * (1.0 - x)
        }
    }

    #[test]
    fn green_function_1d() {
        for n in [33usize, 65, 129] {
            let g = build_grid(DomainKind::UnitInterval, n).unwrap();
            let f = Flux::p_laplacian(2.0, 1).unwrap();
            let zero = GridFunction::zeros(&g);
            let mu = MeasureData::dirac([0.5, 0.0], 1.0);
            let mut spec = ProblemSpec::new(&g, &f, &zero);
            spec.measure = Some(&mu);
            let (u, rep) = solve_problem(&spec, &SolverOptions::default()).unwrap();
            assert!(rep.converged);
            let err = (0..n).map(|k| (u.values[k] - green(g.coords[k][0])).abs()).fold(0.0, f64::max);
            assert!(err <= g.h, "n={n} err={err}");
            assert!(rep.energies.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn hat_and_nearest_loads() {
        let g = build_grid(DomainKind::UnitSquare, 5).unwrap();
        let mu = MeasureData::dirac([0.375, 0.375], 1.0);
        let near = measure_loads(&g, &mu, LoadRule::Nearest);
        assert_eq!(near.iter().sum::<f64>(), 1.0);
        assert_eq!(near[g.node(1, 1)], 1.0);
        let hat = measure_loads(&g, &mu, LoadRule::Hat);
        for (i, j) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
            assert!((hat[g.node(i, j)] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn pinned_box() {
        let g = build_grid(DomainKind::UnitSquare, 17).unwrap();
        let f = Flux::p_laplacian(3.0, 2).unwrap();
        let psi = GridFunction::from_fn(&g, |x| x[0] * (1.0 - x[0]) * x[1]);
        let mu = MeasureData::dirac([0.5, 0.5], 1.0);
        let mut spec = ProblemSpec::new(&g, &f, &psi);
        spec.mode = SolveMode::Double;
        spec.lower = Some(&psi);
        spec.upper = Some(&psi);
        spec.measure = Some(&mu);
        let (u, rep) = solve_problem(&spec, &SolverOptions::default()).unwrap();
        assert!(rep.sweeps <= 2);
        assert_eq!(u, psi);
    }

    #[test]
    fn infeasible_box_rejected() {
        let g = build_grid(DomainKind::UnitSquare, 5).unwrap();
        let f = Flux::p_laplacian(2.0, 2).unwrap();
        let lo = GridFunction::constant(&g, 1.0);
        let hi = GridFunction::constant(&g, -1.0);
        let zero = GridFunction::zeros(&g);
        let mut spec = ProblemSpec::new(&g, &f, &zero);
        spec.mode = SolveMode::Double;
        spec.lower = Some(&lo);
        spec.upper = Some(&hi);
        assert!(matches!(assemble(&spec), Err(LabError::InfeasibleBox { .. })));
    }

    #[test]
    fn affine_data_reproduced() {
        let g = build_grid(DomainKind::UnitSquare, 9).unwrap();
        let f = Flux::p_laplacian(2.0, 2).unwrap();
        let b = GridFunction::from_fn(&g, |x| 1.0 + 2.0 * x[0] - x[1]);
        let (u, _) = solve_problem(&ProblemSpec::new(&g, &f, &b), &SolverOptions::default()).unwrap();
        assert!(u.max_abs_diff_on(&b, 0..g.node_count()) < 1e-8);
    }

    #[test]
    fn nonlinear_converges_with_small_residual() {
        let g = build_grid(DomainKind::UnitSquare, 17).unwrap();
        for p in [1.6, 3.0] {
            let f = Flux::p_laplacian(p, 2).unwrap();
            let zero = GridFunction::zeros(&g);
            let mu = MeasureData::dirac([0.5, 0.5], 1.0);
            let mut spec = ProblemSpec::new(&g, &f, &zero);
            spec.measure = Some(&mu);
            let opts = SolverOptions {
                audit: true,
                ..SolverOptions::accelerated()
            };
            let (u, rep) = solve_problem(&spec, &opts).unwrap();
            assert!(rep.converged, "p={p}");
            assert!(rep.energies.windows(2).all(|w| w[1] <= w[0]));
            assert!(rep.residual < 1e-6, "p={p}: {}", rep.residual);
            assert!(rep.audit_drift.unwrap() < 1e-9);
            assert!(u.values[g.node(8, 8)] > 0.0);
        }
    }

    #[test]
    fn truncation_examples() {
        let g = build_grid(DomainKind::UnitInterval, 33).unwrap();
        let p = ExponentField::constant(2.0, 1).unwrap();
        let gg = GridFunction::from_fn(&g, |x| x[0]);
        let rows = truncation_energy_check(&g, &p, &gg, &gg, &[0.1, 1.0], 1.0).unwrap();
        assert!(rows.iter().all(|r| r.lhs == 0.0));
        let u = GridFunction::from_fn(&g, |x| x[0] + green(x[0]));
        let rows = truncation_energy_check(&g, &p, &u, &gg, &[0.3, 1.0], 1.0).unwrap();
        assert_eq!(rows[0].lhs, rows[1].lhs);
    }
}
