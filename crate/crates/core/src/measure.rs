//! Signed measures (atoms plus a cell density), their mollifications and the
//! augmented mass `kappa`.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::field::{box_rule, gauss_legendre, CellField, GridFunction};
use crate::geometry::{ball_volume, dist, Point};
use crate::grid::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub x: Point,
    pub w: f64,
}

/// Named densities, sampled at cell centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    Constant { value: f64 },
    Gaussian { amplitude: f64, center: Point, width: f64 },
}

impl DensitySpec {
    pub fn eval(&self, x: Point) -> f64 {
        match self {
            DensitySpec::Constant { value } => *value,
            DensitySpec::Gaussian {
                amplitude,
                center,
                width,
            } => {
                let d = dist(x, *center);
                amplitude * (-(d * d) / (2.0 * width * width)).exp()
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct MeasureData {
    pub atoms: Vec<Atom>,
    /// Cell-wise density; `None` for a purely atomic measure.
    pub density: Option<CellField>,
}

impl MeasureData {
    pub fn new(grid: &Grid, atoms: Vec<Atom>, density: Option<&DensitySpec>) -> Result<Self> {
        for a in &atoms {
            if !grid.contains(a.x) {
                return Err(LabError::InvalidArgument(format!(
                    "atom at ({}, {}) lies outside the closed domain",
                    a.x[0], a.x[1]
                )));
            }
            if !a.w.is_finite() {
                return Err(LabError::InvalidArgument("atom weight must be finite".into()));
            }
        }
        Ok(MeasureData {
            atoms,
            density: density.map(|d| CellField::from_fn(grid, |x| d.eval(x))),
        })
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn dirac(x: Point, w: f64) -> Self {
        MeasureData {
            atoms: vec![Atom { x, w }],
            density: None,
        }
    }

    pub fn from_density(density: CellField) -> Self {
        MeasureData {
            atoms: Vec::new(),
            density: Some(density),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.iter().all(|a| a.w == 0.0)
            && self.density.as_ref().is_none_or(|d| d.values.iter().all(|&v| v == 0.0))
    }

    /// `|mu|(Omega)`.
    pub fn total_mass(&self, grid: &Grid) -> f64 {
        self.atoms.iter().map(|a| a.w.abs()).sum::<f64>() + self.density.as_ref().map_or(0.0, |d| d.abs_integral(grid))
    }

    /// Cell an atom is attributed to: the first active cell containing it, or
    /// a cell of the nearest domain node for atoms on a staircase boundary.
    pub fn atom_cell(grid: &Grid, a: &Atom) -> Option<usize> {
        grid.cell_containing(a.x)
            .or_else(|| grid.nearest_node(a.x).and_then(|k| grid.node_cells(k).first().copied()))
    }
}

fn bump_raw(s2: f64) -> f64 {
    if s2 >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - s2)).exp()
    }
}

/// Mass of the unnormalized bump `exp(-1/(1-|x|^2))` on the unit ball.
pub fn bump_mass(dim: usize) -> f64 {
    static MASS: OnceLock<[f64; 2]> = OnceLock::new();
    let m = MASS.get_or_init(|| {
        let (gx, gw) = gauss_legendre(10);
        let panels = 2000;
        let mut one = 0.0;
        let mut two = 0.0;
        for k in 0..panels {
            let a = k as f64 / panels as f64;
            let step = 1.0 / panels as f64;
            for (x, w) in gx.iter().zip(&gw) {
                let r = a + 0.5 * step * (x + 1.0);
                let wt = 0.5 * step * w;
                let f = bump_raw(r * r);
                one += 2.0 * wt * f;
                two += 2.0 * std::f64::consts::PI * r * wt * f;
            }
        }
        [one, two]
    });
    m[dim.clamp(1, 2) - 1]
}

/// The unit-mass bump `phi`.
#[inline]
pub fn bump(dim: usize, x: Point) -> f64 {
    bump_raw(x[0] * x[0] + x[1] * x[1]) / bump_mass(dim)
}

/// `phi_i(x) = i^n phi(i x)`.
#[inline]
pub fn bump_scaled(dim: usize, i: f64, x: Point) -> f64 {
    i.powi(dim as i32) * bump(dim, [i * x[0], i * x[1]])
}

fn intersect(lo: Point, hi: Point, blo: Point, bhi: Point, dim: usize) -> Option<(Point, Point)> {
    let l = [lo[0].max(blo[0]), if dim == 1 { 0.0 } else { lo[1].max(blo[1]) }];
    let h = [hi[0].min(bhi[0]), if dim == 1 { 0.0 } else { hi[1].min(bhi[1]) }];
    if h[0] <= l[0] || (dim == 2 && h[1] <= l[1]) {
        None
    } else {
        Some((l, h))
    }
}

/// `int_{cell ∩ supp} f(y) phi_i(y - a) dy` per cell touched by the support.
pub fn atom_cell_integrals(grid: &Grid, a: Point, i: f64, f: impl Fn(Point) -> f64) -> Vec<(usize, f64)> {
    let dim = grid.dim;
    let rad = 1.0 / i;
    let blo = [a[0] - rad, a[1] - rad];
    let bhi = [a[0] + rad, a[1] + rad];
    let mut out = Vec::new();
    for (c, cell) in grid.cells.iter().enumerate() {
        let Some((lo, hi)) = intersect(cell.lo, cell.hi, blo, bhi, dim) else {
            continue;
        };
        let mut s = 0.0;
        for (y, w) in box_rule(dim, lo, hi, 8, 2) {
            let v = bump_scaled(dim, i, [y[0] - a[0], y[1] - a[1]]);
            if v != 0.0 {
                s += w * v * f(y);
            }
        }
        if s != 0.0 {
            out.push((c, s));
        }
    }
    out
}

fn adaptive_order(len: f64, i: f64) -> (usize, usize) {
    // Written branch-free: the if/else form was miscompiled at opt-level 3
    // by rustc 1.97.1.
    let want = (4.0 * len * i).ceil().min(1e6) as usize + 1;
    (want.clamp(2, 8), if want > 8 { 2 } else { 1 })
}

/// `(rho * phi_i)(x)` for a cell density.
pub fn density_convolution_at(grid: &Grid, density: &CellField, i: f64, x: Point) -> f64 {
    let dim = grid.dim;
    let rad = 1.0 / i;
    let blo = [x[0] - rad, x[1] - rad];
    let bhi = [x[0] + rad, x[1] + rad];
    let mut s = 0.0;
    for (cell, &c) in grid.cells.iter().zip(&density.values) {
        if c == 0.0 {
            continue;
        }
        let Some((lo, hi)) = intersect(cell.lo, cell.hi, blo, bhi, dim) else {
            continue;
        };
        let inside = blo[0] >= cell.lo[0]
            && bhi[0] <= cell.hi[0]
            && (dim == 1 || (blo[1] >= cell.lo[1] && bhi[1] <= cell.hi[1]));
        if inside {
            // The whole support sits in this cell and the bump has unit mass.
            s += c;
            continue;
        }
        let len = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let (order, sub) = adaptive_order(len, i);
        let mut part = 0.0;
        for (y, w) in box_rule(dim, lo, hi, order, sub) {
            part += w * bump_scaled(dim, i, [x[0] - y[0], x[1] - y[1]]);
        }
        s += c * part;
    }
    s
}

/// Pointwise `mu_i(x)`.
pub fn mollified_value_at(mu: &MeasureData, i: usize, grid: &Grid, x: Point) -> f64 {
    let fi = i as f64;
    let mut v: f64 = mu
        .atoms
        .iter()
        .map(|a| a.w * bump_scaled(grid.dim, fi, [x[0] - a.x[0], x[1] - a.x[1]]))
        .sum();
    if let Some(d) = &mu.density {
        v += density_convolution_at(grid, d, fi, x);
    }
    v
}

#[derive(Clone, Debug)]
pub struct Mollified {
    pub index: usize,
    pub width: f64,
    /// Cell averages of `mu_i` over the active cells.
    pub cells: CellField,
    /// Pointwise nodal values.
    pub nodal: GridFunction,
    /// Fraction of each atom's mollified mass that lands inside the grid domain.
    pub atom_interior_fraction: Vec<f64>,
}

impl Mollified {
    pub fn l1_norm(&self, grid: &Grid) -> f64 {
        self.cells.abs_integral(grid)
    }

    pub fn as_measure(&self) -> MeasureData {
        MeasureData::from_density(self.cells.clone())
    }
}

pub fn mollify(mu: &MeasureData, i: usize, grid: &Grid) -> Result<Mollified> {
    if i == 0 {
        return Err(LabError::InvalidArgument("mollification index must be at least 1".into()));
    }
    let fi = i as f64;
    let mut integrals = vec![0.0; grid.cell_count()];
    let mut fractions = Vec::with_capacity(mu.atoms.len());
    for a in &mu.atoms {
        let parts = atom_cell_integrals(grid, a.x, fi, |_| 1.0);
        let mut total = 0.0;
        for (c, s) in parts {
            integrals[c] += a.w * s;
            total += s;
        }
        fractions.push(total);
    }
    if let Some(d) = &mu.density {
        let (order, _) = adaptive_order(grid.h, fi);
        for (c, cell) in grid.cells.iter().enumerate() {
            let mut s = 0.0;
            for (x, w) in box_rule(grid.dim, cell.lo, cell.hi, order, 1) {
                s += w * density_convolution_at(grid, d, fi, x);
            }
            integrals[c] += s;
        }
    }
    let cells = CellField {
        values: integrals
            .iter()
            .zip(&grid.cells)
            .map(|(s, c)| s / c.area)
            .collect(),
    };
    let nodal = GridFunction::from_fn(grid, |x| mollified_value_at(mu, i, grid, x));
    Ok(Mollified {
        index: i,
        width: 1.0 / fi,
        cells,
        nodal,
        atom_interior_fraction: fractions,
    })
}

/// `|mu|(region)`: atoms attributed to a region cell plus the density mass.
pub fn total_variation(mu: &MeasureData, grid: &Grid, region: &[usize]) -> f64 {
    let mask = grid.cell_mask(region);
    let atoms: f64 = mu
        .atoms
        .iter()
        .filter(|a| MeasureData::atom_cell(grid, a).is_some_and(|c| mask[c]))
        .map(|a| a.w.abs())
        .sum();
    atoms + mu.density.as_ref().map_or(0.0, |d| d.abs_integral_on(grid, region))
}

/// `kappa(D) = |mu|(D) + |D ∩ Omega|`.
pub fn kappa(mu: &MeasureData, grid: &Grid, region: &[usize]) -> f64 {
    total_variation(mu, grid, region) + grid.cells_area(region)
}

#[derive(Clone, Debug)]
pub struct MassReport {
    pub index: usize,
    pub l1_norm: f64,
    pub total_variation: f64,
    pub within_bound: bool,
    /// Per atom: `(interior fraction, support touches the boundary)`.
    pub atoms: Vec<(f64, bool)>,
    /// Deficit is only allowed for atoms whose support reaches the boundary.
    pub deficit_explained: bool,
}

pub const MASS_TOL: f64 = 1e-6;

fn support_leaves_domain(grid: &Grid, x: Point, r: f64) -> bool {
    let inside = grid.ball_intersection_area(x, r);
    inside < ball_volume(grid.dim, r) * (1.0 - 1e-12)
}

pub fn l1_mass_check(mu: &MeasureData, i_list: &[usize], grid: &Grid) -> Result<Vec<MassReport>> {
    let tv = mu.total_mass(grid);
    i_list
        .iter()
        .map(|&i| {
            let m = mollify(mu, i, grid)?;
            let l1 = m.l1_norm(grid);
            let atoms: Vec<(f64, bool)> = mu
                .atoms
                .iter()
                .zip(&m.atom_interior_fraction)
                .map(|(a, &f)| (f, support_leaves_domain(grid, a.x, 1.0 / i as f64)))
                .collect();
            let explained = atoms.iter().all(|&(f, near)| near || (f - 1.0).abs() <= MASS_TOL);
            Ok(MassReport {
                index: i,
                l1_norm: l1,
                total_variation: tv,
                within_bound: l1 <= tv + MASS_TOL,
                atoms,
                deficit_explained: explained,
            })
        })
        .collect()
}

/// Registered smooth test functions for the weak-* surrogate.
pub fn test_function(id: usize, x: Point) -> f64 {
    use std::f64::consts::PI;
    match id {
        0 => 1.0,
        1 => (PI * x[0]).sin() * (PI * x[1]).cos(),
        2 => x[0] * x[0] + 0.5 * x[1],
        _ => (2.0 * PI * x[0]).cos() + x[1] * x[1] * x[1],
    }
}

pub const TEST_FUNCTIONS: usize = 4;

/// `|int phi dmu - int phi mu_i dx|` per registered test function and index.
pub fn weak_star_report(mu: &MeasureData, i_list: &[usize], grid: &Grid) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(i_list.len());
    for &i in i_list {
        if i == 0 {
            return Err(LabError::InvalidArgument("mollification index must be at least 1".into()));
        }
        let fi = i as f64;
        let dens = match &mu.density {
            Some(d) => Some((d, mollify(&MeasureData::from_density(d.clone()), i, grid)?)),
            None => None,
        };
        let mut row = Vec::with_capacity(TEST_FUNCTIONS);
        for id in 0..TEST_FUNCTIONS {
            let mut exact: f64 = mu.atoms.iter().map(|a| a.w * test_function(id, a.x)).sum();
            let mut approx = 0.0;
            for a in &mu.atoms {
                approx += a.w
                    * atom_cell_integrals(grid, a.x, fi, |y| test_function(id, y))
                        .iter()
                        .map(|p| p.1)
                        .sum::<f64>();
            }
            if let Some((d, dm)) = &dens {
                for (c, cell) in grid.cells.iter().enumerate() {
                    let t = test_function(id, cell.center) * cell.area;
                    exact += d.values[c] * t;
                    approx += dm.cells.values[c] * t;
                }
            }
            row.push((exact - approx).abs());
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Limsup check on an axis-aligned rectangle `V`: `|mu_i|(V) <= |mu|(closure V)`.
#[derive(Clone, Debug)]
pub struct LimsupReport {
    pub index: usize,
    pub mollified_mass: f64,
    pub closure_mass: f64,
    /// False while an atom outside the closure is within `1/i` of `V`.
    pub applicable: bool,
    pub holds: bool,
}

pub fn limsup_check(mu: &MeasureData, grid: &Grid, rect: (Point, Point), mollified: &Mollified) -> LimsupReport {
    let (lo, hi) = rect;
    let t = 1e-12;
    let in_closed = |p: Point| {
        p[0] >= lo[0] - t && p[0] <= hi[0] + t && (grid.dim == 1 || (p[1] >= lo[1] - t && p[1] <= hi[1] + t))
    };
    let inner: Vec<usize> = (0..grid.cell_count())
        .filter(|&c| in_closed(grid.cells[c].lo) && in_closed(grid.cells[c].hi))
        .collect();
    let touching: Vec<usize> = (0..grid.cell_count())
        .filter(|&c| intersect(grid.cells[c].lo, grid.cells[c].hi, lo, hi, grid.dim).is_some())
        .collect();
    let mollified_mass = mollified.cells.abs_integral_on(grid, &inner);
    let closure_mass = mu.atoms.iter().filter(|a| in_closed(a.x)).map(|a| a.w.abs()).sum::<f64>()
        + mu.density.as_ref().map_or(0.0, |d| d.abs_integral_on(grid, &touching));
    let rect_dist = |p: Point| {
        let dx = (lo[0] - p[0]).max(p[0] - hi[0]).max(0.0);
        let dy = if grid.dim == 1 { 0.0 } else { (lo[1] - p[1]).max(p[1] - hi[1]).max(0.0) };
        dx.hypot(dy)
    };
    let applicable = mu
        .atoms
        .iter()
        .filter(|a| !in_closed(a.x))
        .all(|a| rect_dist(a.x) >= mollified.width);
    LimsupReport {
        index: mollified.index,
        mollified_mass,
        closure_mass,
        applicable,
        holds: mollified_mass <= closure_mass + MASS_TOL,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, window, DomainKind};

    #[test]
    fn quadrature_order_is_capped() {
        assert_eq!(adaptive_order(0.125, 1e5), (8, 2));
        assert_eq!(adaptive_order(1e-6, 1e5), (2, 1));
        assert_eq!(adaptive_order(0.25, 4.0), (5, 1));
    }

    #[test]
    fn bump_masses_match_reference() {
        // Reference values of int exp(-1/(1-|x|^2)) over the unit ball.
        assert!((bump_mass(1) - 0.443_993_816_168_079_4).abs() < 1e-12);
        assert!((bump_mass(2) - 0.466_512_392_556_5).abs() < 1e-9);
    }

    #[test]
    fn dirac_mass_preserved() {
        for i in [2usize, 4, 8] {
            let n = 8 * i * 2 + 1;
            let g = build_grid(DomainKind::UnitSquare, n).unwrap();
            let mu = MeasureData::dirac([0.5, 0.5], 1.0);
            let m = mollify(&mu, i, &g).unwrap();
            assert!((m.cells.integral(&g) - 1.0).abs() < 1e-6, "i={i}");
            for (c, cell) in g.cells.iter().enumerate() {
                if m.cells.values[c] != 0.0 {
                    let dx = (cell.lo[0] - 0.5).max(0.5 - cell.hi[0]).max(0.0);
                    let dy = (cell.lo[1] - 0.5).max(0.5 - cell.hi[1]).max(0.0);
                    assert!(dx.hypot(dy) < 1.0 / i as f64);
                }
            }
        }
        let g = build_grid(DomainKind::UnitInterval, 65).unwrap();
        let m = mollify(&MeasureData::dirac([0.5, 0.0], 1.0), 4, &g).unwrap();
        assert!((m.cells.integral(&g) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pointwise_value() {
        let g = build_grid(DomainKind::UnitSquare, 33).unwrap();
        let mu = MeasureData::dirac([0.5, 0.5], 1.0);
        let i = 4usize;
        let v = mollified_value_at(&mu, i, &g, [0.5 + 0.5 / i as f64, 0.5]);
        let expect = 16.0 * (-1.0f64 / 0.75).exp() / bump_mass(2);
        assert!((v - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn cancellation_and_boundary() {
        let g = build_grid(DomainKind::UnitSquare, 65).unwrap();
        let mu = MeasureData {
            atoms: vec![Atom { x: [0.5, 0.5], w: 1.0 }, Atom { x: [0.5, 0.5], w: -1.0 }],
            density: None,
        };
        let rep = l1_mass_check(&mu, &[4], &g).unwrap();
        assert!(rep[0].l1_norm < 1e-12 && rep[0].total_variation == 2.0);

        // Atom at distance 0.5/i from the bottom edge: the interior fraction is
        // the integral of the bump over the half-plane {y > -0.5}.
        let i = 4;
        let mu = MeasureData::dirac([0.5, 0.5 / i as f64], 1.0);
        let rep = l1_mass_check(&mu, &[i], &g).unwrap();
        let (gx, gw) = gauss_legendre(10);
        let mut oracle = 0.0;
        let panels = 400;
        for a in 0..panels {
            for b in 0..panels {
                let x0 = -1.0 + 2.0 * a as f64 / panels as f64;
                let y0 = -0.5 + 1.5 * b as f64 / panels as f64;
                let (sx, sy) = (2.0 / panels as f64, 1.5 / panels as f64);
                for (x, wx) in gx.iter().zip(&gw) {
                    for (y, wy) in gx.iter().zip(&gw) {
                        let p = [x0 + 0.5 * sx * (x + 1.0), y0 + 0.5 * sy * (y + 1.0)];
                        oracle += 0.25 * sx * sy * wx * wy * bump(2, p);
                    }
                }
            }
        }
        assert!((rep[0].atoms[0].0 - oracle).abs() < 1e-6);
        assert!(rep[0].atoms[0].1 && rep[0].deficit_explained && rep[0].within_bound);
    }

    #[test]
    fn tv_and_kappa() {
        let g = build_grid(DomainKind::UnitSquare, 65).unwrap();
        assert_eq!(total_variation(&MeasureData::zero(), &g, &(0..g.cell_count()).collect::<Vec<_>>()), 0.0);
        assert_eq!(kappa(&MeasureData::dirac([0.5, 0.5], 1.0), &g, &[]), 0.0);
        let mu = MeasureData::dirac([0.3, 0.3], -2.0);
        let all: Vec<usize> = (0..g.cell_count()).collect();
        assert_eq!(total_variation(&mu, &g, &all), 2.0);
        assert!((kappa(&MeasureData::zero(), &g, &all) - 1.0).abs() < 1e-12);

        let w = window(&g, [0.5, 0.5], 0.25).unwrap();
        let k = kappa(&MeasureData::dirac([0.5, 0.5], 1.0), &g, &w.cells);
        assert!((k - 1.0 - std::f64::consts::PI / 16.0).abs() < 4.0 * 0.25 * std::f64::consts::PI * g.h);

        // Atom on a cell edge belongs to the lowest-index cell containing it.
        let mu = MeasureData::dirac([0.5, 0.25], 1.0);
        let c = g.cell_containing([0.5, 0.25]).unwrap();
        assert_eq!(total_variation(&mu, &g, &[c]), 1.0);
        let others: Vec<usize> = all.iter().copied().filter(|&x| x != c).collect();
        assert_eq!(total_variation(&mu, &g, &others), 0.0);
    }

    #[test]
    fn density_identity_at_fine_scale() {
        let g = build_grid(DomainKind::UnitSquare, 9).unwrap();
        let d = CellField::from_fn(&g, |x| 1.0 + x[0]);
        let mu = MeasureData::from_density(d.clone());
        let m = mollify(&mu, 100_000, &g).unwrap();
        let m2 = mollify(&mu, 200_000, &g).unwrap();
        assert_eq!(m.cells.values, m2.cells.values);
        for (a, b) in m.cells.values.iter().zip(&d.values) {
            assert!((a - b).abs() < 1e-13);
        }
        let coarse = mollify(&mu, 4, &g).unwrap();
        assert!(coarse.l1_norm(&g) <= mu.total_mass(&g) + MASS_TOL);
    }

    #[test]
    fn weak_star_and_limsup() {
        let g = build_grid(DomainKind::UnitSquare, 129).unwrap();
        let mu = MeasureData::dirac([0.4, 0.6], 1.0);
        let rows = weak_star_report(&mu, &[2, 4, 8, 16], &g).unwrap();
        for id in 1..TEST_FUNCTIONS {
            for k in 1..rows.len() {
                assert!(rows[k][id] <= rows[k - 1][id] + 1e-9, "fn {id}: {:?}", rows);
            }
        }
        let m = mollify(&mu, 16, &g).unwrap();
        let rep = limsup_check(&mu, &g, ([0.25, 0.5], [0.5, 0.75]), &m);
        assert!(rep.applicable && rep.holds);
        let m8 = mollify(&mu, 8, &g).unwrap();
        let rep = limsup_check(&mu, &g, ([0.5, 0.5], [0.75, 0.75]), &m8);
        assert!(!rep.applicable);
        let rep = limsup_check(&mu, &g, ([0.5, 0.5], [0.75, 0.75]), &m);
        assert!(rep.applicable && rep.holds);
    }
}
