//! Truncations, Hardy-Littlewood and order-1 fractional maximal functions on
//! a radius sweep, and level-set distribution sums.

use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::field::{CellField, GridFunction};
use crate::geometry::{ball_volume, disc_rect_area, dist, Point};
use crate::grid::{Grid, NodeFlag};
use crate::measure::MeasureData;

/// `T_k(y)`: clip to `[-k, k]`. Requires `k > 0`.
#[inline]
pub fn truncate(y: f64, k: f64) -> f64 {
    debug_assert!(k > 0.0);
    y.clamp(-k, k)
}

/// `Phi_k(t) = T_1(t - T_k(t))`.
#[inline]
pub fn phi_trunc(t: f64, k: f64) -> f64 {
    truncate(t - truncate(t, k), 1.0)
}

#[derive(Clone, Debug)]
pub struct MaximalConfig {
    pub radii: Vec<f64>,
    /// Cell mask of the restriction region (`M_Omega'`); inputs vanish outside.
    pub region: Option<Vec<bool>>,
}

impl MaximalConfig {
    /// Geometric sweep `h, sqrt(2) h, ...` up to the first radius beyond the
    /// domain diameter.
    pub fn sweep(grid: &Grid) -> Self {
        Self::geometric(grid.h, grid.diameter(), std::f64::consts::SQRT_2).expect("valid sweep")
    }

    pub fn geometric(r_min: f64, r_max: f64, ratio: f64) -> Result<Self> {
        if !(r_min > 0.0 && r_max >= r_min && ratio > 1.0) {
            return Err(LabError::InvalidArgument(format!(
                "radius sweep needs 0 < r_min <= r_max and ratio > 1 (got {r_min}, {r_max}, {ratio})"
            )));
        }
        let mut radii = vec![r_min];
        while *radii.last().unwrap() <= r_max {
            let next = radii.last().unwrap() * ratio;
            radii.push(next);
        }
        Ok(MaximalConfig { radii, region: None })
    }

    pub fn from_radii(radii: Vec<f64>) -> Result<Self> {
        if radii.is_empty() || radii[0] <= 0.0 || radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LabError::InvalidArgument("radius sweep must be nonempty, positive and increasing".into()));
        }
        Ok(MaximalConfig { radii, region: None })
    }

    pub fn with_region(mut self, mask: Vec<bool>) -> Self {
        self.region = Some(mask);
        self
    }
}

struct Row {
    dj: isize,
    /// Inclusive range of fully covered cells.
    full: Option<(isize, isize)>,
    partial: Vec<(isize, f64)>,
}

/// Disc/cell overlap pattern around a lattice point; `off` is 0 for nodes
/// and 1/2 for cell centers.
struct Stencil {
    rows: Vec<Row>,
}

fn build_stencil(dim: usize, h: f64, r: f64, off: f64) -> Stencil {
    let rr = r / h;
    let tol = 1e-12;
    let mut rows = Vec::new();
    let (dj_lo, dj_hi) = if dim == 1 {
        (0, 0)
    } else {
        ((-rr + off - 1.0).floor() as isize, (rr + off).ceil() as isize)
    };
    for dj in dj_lo..=dj_hi {
        let (y0, y1) = if dim == 1 { (0.0, 0.0) } else { (dj as f64 - off, dj as f64 + 1.0 - off) };
        let ymin = if dim == 1 || (y0 <= 0.0 && y1 >= 0.0) {
            0.0
        } else {
            y0.abs().min(y1.abs())
        };
        if ymin >= rr {
            continue;
        }
        let ymax = y0.abs().max(y1.abs());
        let xo = (rr * rr - ymin * ymin).sqrt();
        let lo = (-xo + off - 1.0).floor() as isize;
        let hi = (xo + off).ceil() as isize;
        let full = if ymax <= rr {
            let xi = (rr * rr - ymax * ymax).sqrt() - tol;
            let a = (-xi + off).ceil() as isize;
            let b = (xi + off - 1.0).floor() as isize;
            (a <= b).then_some((a, b))
        } else {
            None
        };
        let mut partial = Vec::new();
        for di in lo..=hi {
            if let Some((a, b)) = full {
                if di >= a && di <= b {
                    continue;
                }
            }
            let (x0, x1) = ((di as f64 - off) * h, (di as f64 + 1.0 - off) * h);
            let w = if dim == 1 {
                (x1.min(r) - x0.max(-r)).max(0.0)
            } else {
                disc_rect_area(r, x0, x1, y0 * h, y1 * h)
            };
            if w > 0.0 {
                partial.push((di, w));
            }
        }
        rows.push(Row { dj, full, partial });
    }
    Stencil { rows }
}

/// `|f|` on the full lattice with row prefix sums.
struct LatticeField {
    nx: usize,
    ny: usize,
    values: Vec<f64>,
    prefix: Vec<f64>,
    cell_area: f64,
}

impl LatticeField {
    fn new(grid: &Grid, f: &CellField, region: Option<&[bool]>) -> Self {
        let (nx, ny) = grid.lattice_dims();
        let mut values = vec![0.0; nx * ny];
        for (c, cell) in grid.cells.iter().enumerate() {
            if region.is_none_or(|m| m[c]) {
                values[cell.ij[1] * nx + cell.ij[0]] = f.values[c].abs();
            }
        }
        let mut prefix = vec![0.0; (nx + 1) * ny];
        for j in 0..ny {
            for i in 0..nx {
                prefix[j * (nx + 1) + i + 1] = prefix[j * (nx + 1) + i] + values[j * nx + i];
            }
        }
        LatticeField {
            nx,
            ny,
            values,
            prefix,
            cell_area: if grid.dim == 1 { grid.h } else { grid.h * grid.h },
        }
    }

    /// `int_{B_r} |f|` for the point at lattice base `(bi, bj)`.
    fn ball_integral(&self, s: &Stencil, bi: isize, bj: isize) -> f64 {
        let (nx, ny) = (self.nx as isize, self.ny as isize);
        let mut total = 0.0;
        for row in &s.rows {
            let j = bj + row.dj;
            if j < 0 || j >= ny {
                continue;
            }
            let base = j as usize;
            if let Some((a, b)) = row.full {
                let a = (bi + a).max(0);
                let b = (bi + b).min(nx - 1);
                if a <= b {
                    let p = &self.prefix[base * (self.nx + 1)..];
                    total += (p[b as usize + 1] - p[a as usize]) * self.cell_area;
                }
            }
            for &(di, w) in &row.partial {
                let i = bi + di;
                if i >= 0 && i < nx {
                    total += w * self.values[base * self.nx + i as usize];
                }
            }
        }
        total
    }
}

#[derive(Clone, Debug)]
pub struct MaximalField {
    pub nodal: GridFunction,
    pub cells: CellField,
    /// Nodes that coincide with an atom (value capped at the smallest radius).
    pub atom_nodes: Vec<usize>,
}

#[derive(Clone, Copy, PartialEq)]
enum Order {
    Zero,
    One,
}

fn lattice_base(grid: &Grid, p: Point, off: f64) -> (isize, isize) {
    let bi = ((p[0] - grid.origin[0]) / grid.h - off).round() as isize;
    let bj = if grid.dim == 1 {
        0
    } else {
        ((p[1] - grid.origin[1]) / grid.h - off).round() as isize
    };
    (bi, bj)
}

fn maximal_core(
    grid: &Grid,
    cells: Option<&CellField>,
    atoms: &[(Point, f64)],
    config: &MaximalConfig,
    order: Order,
) -> MaximalField {
    let region = config.region.as_deref();
    let lattice = cells
        .filter(|f| f.values.iter().any(|&v| v != 0.0))
        .map(|f| LatticeField::new(grid, f, region));
    let families: Vec<(f64, Vec<Stencil>)> = [0.0, 0.5]
        .iter()
        .map(|&off| {
            let st = if lattice.is_some() {
                config.radii.iter().map(|&r| build_stencil(grid.dim, grid.h, r, off)).collect()
            } else {
                Vec::new()
            };
            (off, st)
        })
        .collect();

    let eval = |p: Point, off: f64, stencils: &[Stencil]| -> f64 {
        let (bi, bj) = lattice_base(grid, p, off);
        let mut best = 0.0f64;
        for (k, &r) in config.radii.iter().enumerate() {
            let mut mass: f64 = atoms.iter().filter(|a| dist(a.0, p) < r).map(|a| a.1).sum();
            if let Some(l) = &lattice {
                mass += l.ball_integral(&stencils[k], bi, bj);
            }
            let avg = mass / ball_volume(grid.dim, r);
            let v = if order == Order::One { r * avg } else { avg };
            best = best.max(v);
        }
        best
    };

    let node_st = &families[0].1;
    let nodal: Vec<f64> = (0..grid.node_count())
        .into_par_iter()
        .map(|k| {
            if grid.flags[k] == NodeFlag::Exterior {
                0.0
            } else {
                eval(grid.coords[k], 0.0, node_st)
            }
        })
        .collect();
    let cell_st = &families[1].1;
    let cell_vals: Vec<f64> = grid
        .cells
        .par_iter()
        .map(|c| eval(c.center, 0.5, cell_st))
        .collect();
    let tol = 1e-12 * grid.h;
    let atom_nodes = (0..grid.node_count())
        .filter(|&k| grid.flags[k] != NodeFlag::Exterior && atoms.iter().any(|a| dist(a.0, grid.coords[k]) <= tol))
        .collect();
    MaximalField {
        nodal: GridFunction { values: nodal },
        cells: CellField { values: cell_vals },
        atom_nodes,
    }
}

/// `M f`: largest ball average of `|f|` (zero outside the region) over the sweep.
pub fn hl_maximal(f: &CellField, grid: &Grid, config: &MaximalConfig) -> MaximalField {
    maximal_core(grid, Some(f), &[], config, Order::Zero)
}

/// `M f` for a nodal function, through its corner-mean cell field.
pub fn hl_maximal_nodal(f: &GridFunction, grid: &Grid, config: &MaximalConfig) -> MaximalField {
    hl_maximal(&CellField::abs_corner_mean(grid, f), grid, config)
}

/// Input of the fractional maximal function.
pub enum MaximalInput<'a> {
    Measure(&'a MeasureData),
    Cells(&'a CellField),
    Nodal(&'a GridFunction),
    /// `kappa = |mu| + Lebesgue measure on Omega`.
    Kappa(&'a MeasureData),
}

/// `M_1`: largest `r |input|(B_r(x)) / |B_r|` over the sweep.
pub fn frac_maximal_1(input: MaximalInput<'_>, grid: &Grid, config: &MaximalConfig) -> MaximalField {
    let region = config.region.as_deref();
    let atom_list = |mu: &MeasureData| -> Vec<(Point, f64)> {
        mu.atoms
            .iter()
            .filter(|a| {
                region.is_none_or(|m| MeasureData::atom_cell(grid, a).is_some_and(|c| m[c]))
            })
            .map(|a| (a.x, a.w.abs()))
            .collect()
    };
    match input {
        MaximalInput::Measure(mu) => maximal_core(grid, mu.density.as_ref(), &atom_list(mu), config, Order::One),
        MaximalInput::Kappa(mu) => {
            let base = CellField {
                values: vec![1.0; grid.cell_count()],
            };
            let cells = match &mu.density {
                Some(d) => CellField {
                    values: d.values.iter().map(|v| v.abs() + 1.0).collect(),
                },
                None => base,
            };
            maximal_core(grid, Some(&cells), &atom_list(mu), config, Order::One)
        }
        MaximalInput::Cells(f) => maximal_core(grid, Some(f), &[], config, Order::One),
        MaximalInput::Nodal(f) => {
            let c = CellField::abs_corner_mean(grid, f);
            maximal_core(grid, Some(&c), &[], config, Order::One)
        }
    }
}

#[derive(Clone, Debug)]
pub struct DistributionReport {
    /// `sum_{k>=1} m^{qk} |{|f| > lambda m^k}|`.
    pub s: f64,
    /// `lambda^q S`.
    pub lower: f64,
    /// `lambda^q (|Omega| + S)`.
    pub upper: f64,
    /// `int |f|^q`.
    pub moment: f64,
    /// Smallest `c` for which both sides of the sandwich hold.
    pub c_emp: f64,
    /// `max(m^q, m^q / (m^q - 1))`, valid for every function.
    pub c_bound: f64,
    pub terms: Vec<f64>,
}

/// Level-set measure of `{|f| > t}` by cell areas.
pub fn level_measure(f: &CellField, grid: &Grid, t: f64) -> f64 {
    f.values
        .iter()
        .zip(&grid.cells)
        .filter(|(v, _)| v.abs() > t)
        .map(|(_, c)| c.area)
        .sum()
}

pub fn distribution_sum(f: &CellField, grid: &Grid, lambda: f64, m: f64, q: f64) -> Result<DistributionReport> {
    if !(lambda > 0.0 && m > 1.0 && q > 0.0) {
        return Err(LabError::InvalidArgument(format!(
            "distribution sum needs lambda > 0, m > 1, q > 0 (got {lambda}, {m}, {q})"
        )));
    }
    let fmax = f.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut terms = Vec::new();
    let mut k = 1i32;
    while lambda * m.powi(k) < fmax {
        terms.push(m.powf(q * k as f64) * level_measure(f, grid, lambda * m.powi(k)));
        k += 1;
    }
    let s: f64 = terms.iter().sum();
    let lq = lambda.powf(q);
    let moment: f64 = f
        .values
        .iter()
        .zip(&grid.cells)
        .map(|(v, c)| v.abs().powf(q) * c.area)
        .sum();
    let lower = lq * s;
    let upper = lq * (grid.area() + s);
    let mut c_emp = 1.0f64;
    if moment > 0.0 {
        c_emp = c_emp.max(lower / moment).max(moment / upper);
    }
    let mq = m.powf(q);
    Ok(DistributionReport {
        s,
        lower,
        upper,
        moment,
        c_emp,
        c_bound: mq.max(mq / (mq - 1.0)),
        terms,
    })
}

#[derive(Clone, Debug)]
pub struct WeakTypeReport {
    /// `(theta, theta |{Mf > theta}| / int |f|)`.
    pub rows: Vec<(f64, f64)>,
    pub c_emp: f64,
}

pub fn weak_type_report(f: &CellField, grid: &Grid, config: &MaximalConfig, thetas: &[f64]) -> WeakTypeReport {
    let mf = hl_maximal(f, grid, config);
    let l1 = f.abs_integral(grid);
    let rows: Vec<(f64, f64)> = thetas
        .iter()
        .map(|&t| {
            let v = t * level_measure(&mf.cells, grid, t);
            (t, if l1 > 0.0 { v / l1 } else { 0.0 })
        })
        .collect();
    let c_emp = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    WeakTypeReport { rows, c_emp }
}
