//! Nodal and cell-wise scalar fields, element gradients and quadrature rules.

use crate::geometry::Point;
use crate::grid::{Element, Grid, NodeFlag};

/// Nodal values on a grid. Exterior nodes hold zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(grid: &Grid) -> Self {
        GridFunction {
            values: vec![0.0; grid.node_count()],
        }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(Point) -> f64) -> Self {
        let values = grid
            .coords
            .iter()
            .zip(&grid.flags)
            .map(|(&p, &fl)| if fl == NodeFlag::Exterior { 0.0 } else { f(p) })
            .collect();
        GridFunction { values }
    }

    pub fn constant(grid: &Grid, c: f64) -> Self {
        Self::from_fn(grid, |_| c)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs_diff_on(&self, other: &GridFunction, nodes: impl IntoIterator<Item = usize>) -> f64 {
        nodes
            .into_iter()
            .map(|k| (self.values[k] - other.values[k]).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite_on(&self, grid: &Grid) -> bool {
        self.values
            .iter()
            .zip(&grid.flags)
            .all(|(v, &f)| f == NodeFlag::Exterior || v.is_finite())
    }
}

/// One value per active cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellField {
    pub values: Vec<f64>,
}

impl CellField {
    pub fn zeros(grid: &Grid) -> Self {
        CellField {
            values: vec![0.0; grid.cell_count()],
        }
    }

    /// Midpoint samples.
    pub fn from_fn(grid: &Grid, f: impl Fn(Point) -> f64) -> Self {
        CellField {
            values: grid.cells.iter().map(|c| f(c.center)).collect(),
        }
    }

    /// Cell value = mean of `|u|` over the cell corners.
    pub fn abs_corner_mean(grid: &Grid, u: &GridFunction) -> Self {
        CellField {
            values: grid
                .cells
                .iter()
                .map(|c| c.corners.iter().map(|&k| u.values[k].abs()).sum::<f64>() / c.corners.len() as f64)
                .collect(),
        }
    }

    pub fn integral(&self, grid: &Grid) -> f64 {
        self.values.iter().zip(&grid.cells).map(|(v, c)| v * c.area).sum()
    }

    pub fn abs_integral(&self, grid: &Grid) -> f64 {
        self.values.iter().zip(&grid.cells).map(|(v, c)| v.abs() * c.area).sum()
    }

    pub fn abs_integral_on(&self, grid: &Grid, cells: &[usize]) -> f64 {
        cells.iter().map(|&c| self.values[c].abs() * grid.cells[c].area).sum()
    }

    pub fn masked(&self, mask: &[bool]) -> Self {
        CellField {
            values: self
                .values
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m { v } else { 0.0 })
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        CellField {
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

#[inline]
pub fn element_gradient(grid: &Grid, e: &Element, u: &[f64]) -> Point {
    let inv = 1.0 / grid.h;
    let gx = (u[e.gx.1] - u[e.gx.0]) * inv;
    let gy = match e.gy {
        Some((a, b)) => (u[b] - u[a]) * inv,
        None => 0.0,
    };
    [gx, gy]
}

#[inline]
pub fn norm(v: Point) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// Per-element gradients of a nodal field.
pub fn element_gradients(grid: &Grid, u: &GridFunction) -> Vec<Point> {
    grid.elements.iter().map(|e| element_gradient(grid, e, &u.values)).collect()
}

/// Cell field of `|Du|`: the area-weighted mean of the element gradient norms,
/// so that its integral equals the element integral of `|Du|`.
pub fn cell_gradient_norm(grid: &Grid, u: &GridFunction) -> CellField {
    let mut values = vec![0.0; grid.cell_count()];
    for e in &grid.elements {
        let g = element_gradient(grid, e, &u.values);
        values[e.cell] += e.weight * norm(g);
    }
    for (v, c) in values.iter_mut().zip(&grid.cells) {
        *v /= c.area;
    }
    CellField { values }
}

/// `sum_e w_e |grad u|^{q(x_c)}` over elements of the masked cells.
pub fn grad_power_integral(
    grid: &Grid,
    u: &GridFunction,
    mask: Option<&[bool]>,
    q: impl Fn(Point) -> f64,
) -> f64 {
    grad_diff_power_integral(grid, u, None, mask, q)
}

/// `sum_e w_e |grad u - grad v|^{q(x_c)}`.
pub fn grad_diff_power_integral(
    grid: &Grid,
    u: &GridFunction,
    v: Option<&GridFunction>,
    mask: Option<&[bool]>,
    q: impl Fn(Point) -> f64,
) -> f64 {
    let mut total = 0.0;
    let mut last_cell = usize::MAX;
    let mut qc = 1.0;
    for e in &grid.elements {
        if let Some(m) = mask {
            if !m[e.cell] {
                continue;
            }
        }
        if e.cell != last_cell {
            last_cell = e.cell;
            qc = q(grid.cells[e.cell].center);
        }
        let mut g = element_gradient(grid, e, &u.values);
        if let Some(v) = v {
            let gv = element_gradient(grid, e, &v.values);
            g = [g[0] - gv[0], g[1] - gv[1]];
        }
        let n = norm(g);
        total += e.weight * if qc == 1.0 { n } else if n == 0.0 { 0.0 } else { n.powf(qc) };
    }
    total
}

/// Maximum element gradient norm over the masked cells.
pub fn grad_sup(grid: &Grid, u: &GridFunction, mask: &[bool]) -> f64 {
    grid.elements
        .iter()
        .filter(|e| mask[e.cell])
        .map(|e| norm(element_gradient(grid, e, &u.values)))
        .fold(0.0, f64::max)
}

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pm) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Tensor Gauss rule on a box with `sub` subdivisions per axis; points and
/// weights (weights sum to the box measure).
pub fn box_rule(dim: usize, lo: Point, hi: Point, order: usize, sub: usize) -> Vec<(Point, f64)> {
    let (gx, gw) = gauss_legendre(order);
    let sub = sub.max(1);
    let axis = |a: f64, b: f64| -> Vec<(f64, f64)> {
        let step = (b - a) / sub as f64;
        let mut out = Vec::with_capacity(sub * order);
        for s in 0..sub {
            let l = a + s as f64 * step;
            for (x, w) in gx.iter().zip(&gw) {
                out.push((l + 0.5 * step * (x + 1.0), 0.5 * step * w));
            }
        }
        out
    };
    let xs = axis(lo[0], hi[0]);
    if dim == 1 {
        return xs.into_iter().map(|(x, w)| ([x, 0.0], w)).collect();
    }
    let ys = axis(lo[1], hi[1]);
    let mut pts = Vec::with_capacity(xs.len() * ys.len());
    for &(y, wy) in &ys {
        for &(x, wx) in &xs {
            pts.push(([x, y], wx * wy));
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, DomainKind};

    #[test]
    fn gauss_rules_are_exact() {
        for n in [1usize, 2, 4, 8, 12] {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
            for deg in 0..(2 * n) {
                let exact = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                let got: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                assert!((got - exact).abs() < 1e-13, "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn affine_gradients_exact() {
        let g = build_grid(DomainKind::UnitSquare, 9).unwrap();
        let u = GridFunction::from_fn(&g, |p| 2.0 * p[0] - 3.0 * p[1] + 1.0);
        for gr in element_gradients(&g, &u) {
            assert!((gr[0] - 2.0).abs() < 1e-12 && (gr[1] + 3.0).abs() < 1e-12);
        }
        let l1 = grad_power_integral(&g, &u, None, |_| 1.0);
        assert!((l1 - 13f64.sqrt()).abs() < 1e-12);
        let c = cell_gradient_norm(&g, &u);
        assert!((c.integral(&g) - l1).abs() < 1e-12);
    }

    #[test]
    fn box_rule_weights() {
        let pts = box_rule(2, [0.0, 0.0], [0.5, 0.25], 4, 3);
        let s: f64 = pts.iter().map(|p| p.1).sum();
        assert!((s - 0.125).abs() < 1e-15);
        let m: f64 = pts.iter().map(|(p, w)| w * p[0] * p[0] * p[1]).sum();
        assert!((m - (0.125 / 3.0) * (0.0625 / 2.0)).abs() < 1e-15);
    }
}
