//! Structured grids on the supported domains, sub-windows and measure-density
//! diagnostics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geometry::{ball_box_measure, ball_volume, dist, Point};

const GEOM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    UnitInterval,
    UnitSquare,
    LShape,
    HalfDisc,
}

impl DomainKind {
    pub fn dim(self) -> usize {
        match self {
            DomainKind::UnitInterval => 1,
            _ => 2,
        }
    }

    /// Closed-domain membership.
    pub fn contains(self, p: Point) -> bool {
        let [x, y] = p;
        let t = GEOM_TOL;
        match self {
            DomainKind::UnitInterval => x >= -t && x <= 1.0 + t && y.abs() <= t,
            DomainKind::UnitSquare => x >= -t && x <= 1.0 + t && y >= -t && y <= 1.0 + t,
            DomainKind::LShape => {
                x >= -t && x <= 1.0 + t && y >= -t && y <= 1.0 + t && !(x > 0.5 + t && y > 0.5 + t)
            }
            DomainKind::HalfDisc => y >= -t && x * x + y * y <= 1.0 + t,
        }
    }

    /// Exact measure of the continuum domain.
    pub fn area(self) -> f64 {
        match self {
            DomainKind::UnitInterval | DomainKind::UnitSquare => 1.0,
            DomainKind::LShape => 0.75,
            DomainKind::HalfDisc => std::f64::consts::FRAC_PI_2,
        }
    }

    pub fn perimeter(self) -> f64 {
        match self {
            DomainKind::UnitInterval => 2.0,
            DomainKind::UnitSquare | DomainKind::LShape => 4.0,
            DomainKind::HalfDisc => std::f64::consts::PI + 2.0,
        }
    }

    pub fn diameter(self) -> f64 {
        match self {
            DomainKind::UnitInterval => 1.0,
            DomainKind::UnitSquare | DomainKind::LShape => std::f64::consts::SQRT_2,
            DomainKind::HalfDisc => 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainKind::UnitInterval => "unit_interval",
            DomainKind::UnitSquare => "unit_square",
            DomainKind::LShape => "l_shape",
            DomainKind::HalfDisc => "half_disc",
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit_interval" | "interval" => Ok(DomainKind::UnitInterval),
            "unit_square" | "square" => Ok(DomainKind::UnitSquare),
            "l_shape" | "lshape" => Ok(DomainKind::LShape),
            "half_disc" | "halfdisc" => Ok(DomainKind::HalfDisc),
            other => Err(LabError::UnsupportedDomain(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeFlag {
    Interior,
    Dirichlet,
    Exterior,
}

#[derive(Clone, Debug)]
pub struct Cell {
    /// Lattice position of the lower-left corner.
    pub ij: [usize; 2],
    /// Corner nodes: `[bl, br, tl, tr]` in 2-D, `[left, right]` in 1-D.
    pub corners: Vec<usize>,
    pub center: Point,
    pub lo: Point,
    pub hi: Point,
    pub area: f64,
}

/// One gradient-carrying element. In 2-D every cell is split into the four
/// corner triangles of its two diagonal triangulations, each carrying a
/// quarter of the cell area; in 1-D the cell itself is the element.
#[derive(Clone, Copy, Debug)]
pub struct Element {
    pub cell: usize,
    pub weight: f64,
    /// Node pair `(from, to)` for the x-difference.
    pub gx: (usize, usize),
    /// Node pair for the y-difference (absent in 1-D).
    pub gy: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Grid {
    pub kind: DomainKind,
    pub resolution: usize,
    pub h: f64,
    pub dim: usize,
    pub nx: usize,
    pub ny: usize,
    pub origin: Point,
    pub coords: Vec<Point>,
    pub flags: Vec<NodeFlag>,
    pub cells: Vec<Cell>,
    pub elements: Vec<Element>,
    /// Lattice cell -> active cell index.
    lattice_cells: Vec<Option<usize>>,
    /// Active cells incident to each node.
    node_cells: Vec<Vec<usize>>,
}

pub fn build_grid(kind: DomainKind, n: usize) -> Result<Grid> {
    if n < 3 {
        return Err(LabError::ResolutionTooSmall(n));
    }
    let h = 1.0 / (n - 1) as f64;
    let (nx, ny, origin) = match kind {
        DomainKind::UnitInterval => (n, 1, [0.0, 0.0]),
        DomainKind::UnitSquare | DomainKind::LShape => (n, n, [0.0, 0.0]),
        DomainKind::HalfDisc => (2 * (n - 1) + 1, n, [-1.0, 0.0]),
    };
    let dim = kind.dim();

    let mut coords = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            coords.push([origin[0] + i as f64 * h, origin[1] + j as f64 * h]);
        }
    }
    let in_domain: Vec<bool> = coords.iter().map(|&p| kind.contains(p)).collect();

    let (cx, cy) = if dim == 1 { (nx - 1, 1) } else { (nx - 1, ny - 1) };
    let mut lattice_cells = vec![None; cx * cy];
    let mut cells = Vec::new();
    for cj in 0..cy {
        for ci in 0..cx {
            let corners: Vec<usize> = if dim == 1 {
                vec![ci, ci + 1]
            } else {
                let b = cj * nx + ci;
                vec![b, b + 1, b + nx, b + nx + 1]
            };
            if !corners.iter().all(|&c| in_domain[c]) {
                continue;
            }
            let lo = coords[corners[0]];
            let hi = if dim == 1 {
                [lo[0] + h, 0.0]
            } else {
                [lo[0] + h, lo[1] + h]
            };
            let center = if dim == 1 {
                [lo[0] + 0.5 * h, 0.0]
            } else {
                [lo[0] + 0.5 * h, lo[1] + 0.5 * h]
            };
            let area = if dim == 1 { h } else { h * h };
            lattice_cells[cj * cx + ci] = Some(cells.len());
            cells.push(Cell {
                ij: [ci, cj],
                corners,
                center,
                lo,
                hi,
                area,
            });
        }
    }

    let mut node_cells = vec![Vec::new(); nx * ny];
    for (c, cell) in cells.iter().enumerate() {
        for &k in &cell.corners {
            node_cells[k].push(c);
        }
    }

    let mut flags = vec![NodeFlag::Exterior; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let k = j * nx + i;
            if !in_domain[k] {
                continue;
            }
            let full = if dim == 1 {
                i > 0 && i + 1 < nx && lattice_cells[i - 1].is_some() && lattice_cells[i].is_some()
            } else {
                i > 0
                    && j > 0
                    && i + 1 < nx
                    && j + 1 < ny
                    && [(i - 1, j - 1), (i, j - 1), (i - 1, j), (i, j)]
                        .iter()
                        .all(|&(a, b)| lattice_cells[b * cx + a].is_some())
            };
            flags[k] = if full {
                NodeFlag::Interior
            } else {
                NodeFlag::Dirichlet
            };
        }
    }

    let mut elements = Vec::with_capacity(cells.len() * if dim == 1 { 1 } else { 4 });
    for (c, cell) in cells.iter().enumerate() {
        if dim == 1 {
            elements.push(Element {
                cell: c,
                weight: cell.area,
                gx: (cell.corners[0], cell.corners[1]),
                gy: None,
            });
        } else {
            let [bl, br, tl, tr] = [cell.corners[0], cell.corners[1], cell.corners[2], cell.corners[3]];
            let w = 0.25 * cell.area;
            for (gx, gy) in [
                ((bl, br), (bl, tl)),
                ((bl, br), (br, tr)),
                ((tl, tr), (bl, tl)),
                ((tl, tr), (br, tr)),
            ] {
                elements.push(Element {
                    cell: c,
                    weight: w,
                    gx,
                    gy: Some(gy),
                });
            }
        }
    }

    Ok(Grid {
        kind,
        resolution: n,
        h,
        dim,
        nx,
        ny,
        origin,
        coords,
        flags,
        cells,
        elements,
        lattice_cells,
        node_cells,
    })
}

impl Grid {
    pub fn node_count(&self) -> usize {
        self.coords.len()
    }

    pub fn domain_node_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f != NodeFlag::Exterior).count()
    }

    pub fn interior_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == NodeFlag::Interior)
            .map(|(k, _)| k)
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn node_ij(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    /// Number of lattice cells per axis (`ny` is 1 in 1-D).
    pub fn lattice_dims(&self) -> (usize, usize) {
        if self.dim == 1 {
            (self.nx - 1, 1)
        } else {
            (self.nx - 1, self.ny - 1)
        }
    }

    pub fn lattice_cell(&self, ci: isize, cj: isize) -> Option<usize> {
        let (cx, cy) = self.lattice_dims();
        if ci < 0 || cj < 0 || ci as usize >= cx || cj as usize >= cy {
            return None;
        }
        self.lattice_cells[cj as usize * cx + ci as usize]
    }

    pub fn node_cells(&self, k: usize) -> &[usize] {
        &self.node_cells[k]
    }

    pub fn elements_of_cell(&self, c: usize) -> &[Element] {
        let per = if self.dim == 1 { 1 } else { 4 };
        &self.elements[c * per..(c + 1) * per]
    }

    /// Total area of the active cells.
    pub fn area(&self) -> f64 {
        self.cells.iter().map(|c| c.area).sum()
    }

    pub fn diameter(&self) -> f64 {
        self.kind.diameter()
    }

    pub fn contains(&self, p: Point) -> bool {
        self.kind.contains(p)
    }

    /// Lumped (dual) area attached to a node.
    pub fn node_area(&self, k: usize) -> f64 {
        let per = if self.dim == 1 { 2.0 } else { 4.0 };
        self.node_cells[k].iter().map(|&c| self.cells[c].area / per).sum()
    }

    /// First active cell (in lattice order) whose closure contains `p`.
    pub fn cell_containing(&self, p: Point) -> Option<usize> {
        let fx = (p[0] - self.origin[0]) / self.h;
        let fy = if self.dim == 1 { 0.0 } else { (p[1] - self.origin[1]) / self.h };
        let ci = fx.floor() as isize;
        let cj = fy.floor() as isize;
        let mut best: Option<usize> = None;
        let jr: Vec<isize> = if self.dim == 1 { vec![0] } else { vec![cj - 1, cj] };
        for &b in &jr {
            for a in [ci - 1, ci] {
                if let Some(c) = self.lattice_cell(a, b) {
                    let cell = &self.cells[c];
                    let inside_x = p[0] >= cell.lo[0] - GEOM_TOL && p[0] <= cell.hi[0] + GEOM_TOL;
                    let inside_y = self.dim == 1
                        || (p[1] >= cell.lo[1] - GEOM_TOL && p[1] <= cell.hi[1] + GEOM_TOL);
                    if inside_x && inside_y {
                        best = Some(best.map_or(c, |b: usize| b.min(c)));
                    }
                }
            }
        }
        best
    }

    /// Nearest non-exterior node; exact ties go to the lower index.
    pub fn nearest_node(&self, p: Point) -> Option<usize> {
        let fx = ((p[0] - self.origin[0]) / self.h).round() as isize;
        let fy = if self.dim == 1 {
            0
        } else {
            ((p[1] - self.origin[1]) / self.h).round() as isize
        };
        let span = 2isize;
        let mut best: Option<(f64, usize)> = None;
        let jr = if self.dim == 1 { 0..=0 } else { (fy - span)..=(fy + span) };
        for j in jr {
            for i in (fx - span)..=(fx + span) {
                if i < 0 || j < 0 || i as usize >= self.nx || j as usize >= self.ny {
                    continue;
                }
                let k = self.node(i as usize, j as usize);
                if self.flags[k] == NodeFlag::Exterior {
                    continue;
                }
                let d = dist(self.coords[k], p);
                match best {
                    Some((bd, bk)) if d > bd + GEOM_TOL || (d >= bd - GEOM_TOL && k > bk) => {}
                    _ => best = Some((d, k)),
                }
            }
        }
        best.map(|(_, k)| k)
    }

    /// Active cells whose center lies in the open ball.
    pub fn cells_in_ball(&self, center: Point, radius: f64) -> Vec<usize> {
        (0..self.cells.len())
            .filter(|&c| dist(self.cells[c].center, center) < radius)
            .collect()
    }

    /// Non-exterior nodes in the open ball.
    pub fn nodes_in_ball(&self, center: Point, radius: f64) -> Vec<usize> {
        (0..self.coords.len())
            .filter(|&k| self.flags[k] != NodeFlag::Exterior && dist(self.coords[k], center) < radius)
            .collect()
    }

    pub fn cell_mask(&self, cells: &[usize]) -> Vec<bool> {
        let mut m = vec![false; self.cells.len()];
        for &c in cells {
            m[c] = true;
        }
        m
    }

    pub fn cells_area(&self, cells: &[usize]) -> f64 {
        cells.iter().map(|&c| self.cells[c].area).sum()
    }

    /// Exact `|Omega_h ∩ B_r(x)|` over the active cells.
    pub fn ball_intersection_area(&self, x: Point, r: f64) -> f64 {
        self.cells
            .iter()
            .map(|c| ball_box_measure(self.dim, x, r, c.lo, c.hi))
            .sum()
    }
}

/// `Omega ∩ B_rho(x0)` together with the flatness diagnostics of the
/// boundary geometry inside the ball.
#[derive(Clone, Debug)]
pub struct SubWindow {
    pub center: Point,
    pub radius: f64,
    pub nodes: Vec<usize>,
    pub cells: Vec<usize>,
    /// Inward axis normal of the best half-space template, if any template
    /// satisfies the inner inclusion.
    pub normal: Option<Point>,
    /// Smallest `delta` for which the outer inclusion holds with `normal`.
    pub flatness: Option<f64>,
}

impl SubWindow {
    /// Whether `B^+ ⊂ Omega_rho ⊂ B ∩ {x_n > -2 delta rho}` holds for one of the
    /// tested axis templates.
    pub fn geometric_setting(&self, delta: f64) -> bool {
        self.flatness.is_some_and(|d| d <= delta + GEOM_TOL)
    }

    /// Active cells with center in `B_radius(center) ∩ {(x - center)·normal > 0}`.
    pub fn upper_cells(&self, grid: &Grid, radius: f64) -> Vec<usize> {
        let nu = self.normal.unwrap_or(if grid.dim == 1 { [1.0, 0.0] } else { [0.0, 1.0] });
        (0..grid.cells.len())
            .filter(|&c| {
                let p = grid.cells[c].center;
                let s = (p[0] - self.center[0]) * nu[0] + (p[1] - self.center[1]) * nu[1];
                s > 0.0 && dist(p, self.center) < radius
            })
            .collect()
    }

    pub fn area(&self, grid: &Grid) -> f64 {
        grid.cells_area(&self.cells)
    }
}

pub fn window(grid: &Grid, x0: Point, rho: f64) -> Result<SubWindow> {
    if !(rho > 0.0) {
        return Err(LabError::InvalidArgument(format!("window radius {rho} must be positive")));
    }
    if !grid.contains(x0) {
        return Err(LabError::InvalidArgument(format!(
            "window center ({}, {}) lies outside the domain",
            x0[0], x0[1]
        )));
    }
    let nodes = grid.nodes_in_ball(x0, rho);
    if nodes.is_empty() {
        return Err(LabError::EmptyWindow {
            x: x0[0],
            y: x0[1],
            radius: rho,
        });
    }
    let cells = grid.cells_in_ball(x0, rho);

    let normals: Vec<Point> = if grid.dim == 1 {
        vec![[1.0, 0.0], [-1.0, 0.0]]
    } else {
        vec![[0.0, 1.0], [1.0, 0.0], [0.0, -1.0], [-1.0, 0.0]]
    };
    let mut best: Option<(Point, f64)> = None;
    for nu in normals {
        if let Some(d) = template_flatness(grid, x0, rho, nu) {
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((nu, d));
            }
        }
    }
    Ok(SubWindow {
        center: x0,
        radius: rho,
        nodes,
        cells,
        normal: best.map(|b| b.0),
        flatness: best.map(|b| b.1),
    })
}

/// Tests the half-space template with inward normal `nu` on the lattice points
/// of the open ball. Returns the smallest admissible delta, or `None` when the
/// upper half-ball is not contained in the domain.
fn template_flatness(grid: &Grid, x0: Point, rho: f64, nu: Point) -> Option<f64> {
    let h = grid.h;
    let i0 = ((x0[0] - rho - grid.origin[0]) / h).floor() as i64;
    let i1 = ((x0[0] + rho - grid.origin[0]) / h).ceil() as i64;
    let (j0, j1) = if grid.dim == 1 {
        (0, 0)
    } else {
        (
            ((x0[1] - rho - grid.origin[1]) / h).floor() as i64,
            ((x0[1] + rho - grid.origin[1]) / h).ceil() as i64,
        )
    };
    let mut worst_depth = 0.0f64;
    for j in j0..=j1 {
        for i in i0..=i1 {
            let p = [grid.origin[0] + i as f64 * h, grid.origin[1] + j as f64 * h];
            if dist(p, x0) >= rho {
                continue;
            }
            let s = (p[0] - x0[0]) * nu[0] + (p[1] - x0[1]) * nu[1];
            let inside = grid.contains(p);
            if s > GEOM_TOL && !inside {
                return None;
            }
            if inside {
                worst_depth = worst_depth.max(-s);
            }
        }
    }
    Some(worst_depth.max(0.0) / (2.0 * rho))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensityRatio {
    pub radius: f64,
    /// `|B_r(x)| / |Omega ∩ B_r(x)|`, `+inf` when the intersection is empty.
    pub interior_ratio: f64,
    /// `|Omega^c ∩ B_r(x)| / |B_r(x)|`.
    pub complement_ratio: f64,
}

pub fn measure_density_report(grid: &Grid, x: Point, radii: &[f64]) -> Vec<DensityRatio> {
    radii
        .iter()
        .map(|&r| {
            let ball = ball_volume(grid.dim, r);
            let inside = grid.ball_intersection_area(x, r);
            let interior_ratio = if inside > 0.0 { ball / inside } else { f64::INFINITY };
            DensityRatio {
                radius: r,
                interior_ratio,
                complement_ratio: ((ball - inside) / ball).max(0.0),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_counts() {
        let g = build_grid(DomainKind::UnitInterval, 3).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(g.cell_count(), 2);
        assert_eq!(g.h, 0.5);
        assert_eq!(g.interior_nodes().count(), 1);
    }

    #[test]
    fn square_counts() {
        let g = build_grid(DomainKind::UnitSquare, 3).unwrap();
        assert_eq!(g.node_count(), 9);
        assert_eq!(g.cell_count(), 4);
        assert_eq!(g.interior_nodes().collect::<Vec<_>>(), vec![4]);
        assert_eq!(g.elements.len(), 16);
    }

    #[test]
    fn too_small() {
        assert!(matches!(
            build_grid(DomainKind::UnitSquare, 2),
            Err(LabError::ResolutionTooSmall(2))
        ));
        assert!("annulus".parse::<DomainKind>().is_err());
    }

    #[test]
    fn half_disc_matches_brute_force() {
        let g = build_grid(DomainKind::HalfDisc, 65).unwrap();
        let h = 1.0 / 64.0;
        let mut count = 0;
        for j in 0..65 {
            for i in 0..129 {
                let x = -1.0 + i as f64 * h;
                let y = j as f64 * h;
                if y >= 0.0 && x * x + y * y <= 1.0 + 1e-12 {
                    count += 1;
                }
            }
        }
        assert_eq!(g.domain_node_count(), count);
        for i in 0..g.nx {
            assert_eq!(g.flags[g.node(i, 0)], NodeFlag::Dirichlet);
        }
        let missing = DomainKind::HalfDisc.area() - g.area();
        assert!(missing >= 0.0 && missing <= 2.0 * g.h * DomainKind::HalfDisc.perimeter());
    }

    #[test]
    fn rectilinear_areas_exact() {
        let g = build_grid(DomainKind::LShape, 33).unwrap();
        assert!((g.area() - 0.75).abs() < 1e-12);
        let g = build_grid(DomainKind::UnitSquare, 17).unwrap();
        assert!((g.area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reentrant_edges_are_dirichlet() {
        let g = build_grid(DomainKind::LShape, 9).unwrap();
        assert_eq!(g.flags[g.node(4, 6)], NodeFlag::Dirichlet);
        assert_eq!(g.flags[g.node(6, 4)], NodeFlag::Dirichlet);
        assert_eq!(g.flags[g.node(6, 6)], NodeFlag::Exterior);
        assert_eq!(g.flags[g.node(3, 3)], NodeFlag::Interior);
    }

    #[test]
    fn window_whole_and_flat_edge() {
        let g = build_grid(DomainKind::UnitSquare, 17).unwrap();
        let w = window(&g, [0.5, 0.5], 2.0).unwrap();
        assert_eq!(w.nodes.len(), g.node_count());

        let w = window(&g, [0.5, 0.0], 0.25).unwrap();
        assert!(w.geometric_setting(0.0));
        assert_eq!(w.normal, Some([0.0, 1.0]));
        for &k in &w.nodes {
            assert!(dist(g.coords[k], [0.5, 0.0]) < 0.25);
            assert!(g.coords[k][1] >= 0.0);
        }
    }

    #[test]
    fn reentrant_corner_window() {
        let g = build_grid(DomainKind::LShape, 41).unwrap();
        let w = window(&g, [0.5, 0.5], 0.2).unwrap();
        let mut count = 0;
        for k in 0..g.node_count() {
            let p = g.coords[k];
            let inside = !(p[0] > 0.5 + 1e-12 && p[1] > 0.5 + 1e-12);
            if inside && dist(p, [0.5, 0.5]) < 0.2 {
                count += 1;
            }
        }
        assert_eq!(w.nodes.len(), count);
        // No axis half-plane fits a reentrant corner with small delta.
        assert!(!w.geometric_setting(0.1));
    }

    #[test]
    fn empty_window_and_outside_center() {
        let g = build_grid(DomainKind::UnitSquare, 5).unwrap();
        assert!(matches!(
            window(&g, [0.1, 0.1], 1e-3),
            Err(LabError::EmptyWindow { .. })
        ));
        assert!(window(&g, [2.0, 0.1], 0.5).is_err());
    }

    #[test]
    fn density_ratios() {
        let g = build_grid(DomainKind::UnitSquare, 33).unwrap();
        let rep = measure_density_report(&g, [0.5, 0.5], &[0.1, 0.3]);
        for r in &rep {
            assert!((r.interior_ratio - 1.0).abs() < 1e-12);
        }
        let rep = measure_density_report(&g, [0.5, 0.0], &[0.1, 0.25]);
        for r in &rep {
            assert!((r.complement_ratio - 0.5).abs() < 1e-12);
            assert!(r.complement_ratio >= (7.0f64 / 16.0).powi(2));
        }
        let rep = measure_density_report(&g, [0.0, 0.0], &[0.2]);
        assert!((rep[0].complement_ratio - 0.75).abs() < 1e-12);
        let rep = measure_density_report(&g, [5.0, 5.0], &[0.2]);
        assert!(rep[0].interior_ratio.is_infinite());
    }

    #[test]
    fn node_areas_partition_domain() {
        let g = build_grid(DomainKind::LShape, 17).unwrap();
        let s: f64 = (0..g.node_count()).map(|k| g.node_area(k)).sum();
        assert!((s - g.area()).abs() < 1e-12);
    }

    #[test]
    fn cell_lookup_prefers_lower_index() {
        let g = build_grid(DomainKind::UnitSquare, 5).unwrap();
        let c = g.cell_containing([0.5, 0.5]).unwrap();
        assert_eq!(g.cells[c].ij, [1, 1]);
        assert_eq!(g.nearest_node([0.125, 0.125]), Some(0));
        assert_eq!(g.nearest_node([0.3, 0.49]), Some(g.node(1, 2)));
    }
}
