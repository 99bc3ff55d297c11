//! Variable exponents, weights, the model flux `gamma(x)|xi|^{p(x)-2} xi`,
//! structure-constant checks, mean oscillation, the frozen flux and
//! variable-exponent modulars.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::field::{CellField, GridFunction};
use crate::geometry::{dist, Point};
use crate::grid::{Grid, NodeFlag, SubWindow};

fn one() -> f64 {
    1.0
}

fn default_cap() -> f64 {
    (-2.0f64).exp()
}

/// Registered exponent functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExponentSpec {
    Constant {
        value: f64,
    },
    /// `base + amplitude * sin(2 pi frequency x_1)`.
    Sin {
        base: f64,
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
    },
    /// `base + amplitude / ln(1/|x - center|)` inside `|x - center| < cap`,
    /// frozen at the cap value outside.
    Log {
        base: f64,
        amplitude: f64,
        #[serde(default)]
        center: Point,
        #[serde(default = "default_cap")]
        cap: f64,
    },
    /// `base + slope * x_1`.
    Linear {
        base: f64,
        slope: f64,
    },
}

impl ExponentSpec {
    #[inline]
    pub fn eval(&self, x: Point) -> f64 {
        match self {
            ExponentSpec::Constant { value } => *value,
            ExponentSpec::Sin {
                base,
                amplitude,
                frequency,
            } => base + amplitude * (2.0 * std::f64::consts::PI * frequency * x[0]).sin(),
            ExponentSpec::Log {
                base,
                amplitude,
                center,
                cap,
            } => {
                let d = dist(x, *center).min(*cap);
                if d == 0.0 {
                    *base
                } else {
                    base + amplitude / (1.0 / d).ln()
                }
            }
            ExponentSpec::Linear { base, slope } => base + slope * x[0],
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExponentField {
    pub spec: ExponentSpec,
    pub dim: usize,
    pub p_minus: f64,
    pub p_plus: f64,
}

impl ExponentField {
    /// Builds the field and checks `2 - 1/n < p^- <= p^+ < inf`. The linear
    /// kind is bounded over `x_1 in [x_lo, x_hi]`.
    pub fn new(spec: ExponentSpec, dim: usize, x_range: (f64, f64)) -> Result<Self> {
        let (lo, hi) = match &spec {
            ExponentSpec::Constant { value } => (*value, *value),
            ExponentSpec::Sin { base, amplitude, .. } => (base - amplitude.abs(), base + amplitude.abs()),
            ExponentSpec::Log {
                base, amplitude, cap, ..
            } => {
                if !(*cap > 0.0 && *cap < 1.0) {
                    return Err(LabError::InvalidArgument(format!("log exponent cap {cap} must lie in (0,1)")));
                }
                let edge = amplitude / (1.0 / cap).ln();
                (base.min(base + edge), base.max(base + edge))
            }
            ExponentSpec::Linear { base, slope } => {
                let a = base + slope * x_range.0;
                let b = base + slope * x_range.1;
                (a.min(b), a.max(b))
            }
        };
        let floor = 2.0 - 1.0 / dim as f64;
        if !(lo > floor) || !hi.is_finite() {
            return Err(LabError::InvalidArgument(format!(
                "exponent range [{lo}, {hi}] violates 2 - 1/n < p^- <= p^+ < inf (n = {dim})"
            )));
        }
        Ok(ExponentField {
            spec,
            dim,
            p_minus: lo,
            p_plus: hi,
        })
    }

    pub fn constant(p: f64, dim: usize) -> Result<Self> {
        Self::new(ExponentSpec::Constant { value: p }, dim, (0.0, 1.0))
    }

    pub fn for_grid(spec: ExponentSpec, grid: &Grid) -> Result<Self> {
        let xs = grid.coords.iter().map(|p| p[0]);
        let lo = xs.clone().fold(f64::INFINITY, f64::min);
        let hi = xs.fold(f64::NEG_INFINITY, f64::max);
        Self::new(spec, grid.dim, (lo, hi))
    }

    #[inline]
    pub fn eval(&self, x: Point) -> f64 {
        self.spec.eval(x)
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.spec, ExponentSpec::Constant { .. })
    }

    /// Closed-form modulus of continuity.
    pub fn modulus(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        match &self.spec {
            ExponentSpec::Constant { .. } => 0.0,
            ExponentSpec::Sin {
                amplitude, frequency, ..
            } => {
                let t = (std::f64::consts::PI * frequency.abs() * r).min(std::f64::consts::FRAC_PI_2);
                2.0 * amplitude.abs() * t.sin()
            }
            ExponentSpec::Log { amplitude, cap, .. } => amplitude.abs() / (1.0 / r.min(*cap)).ln(),
            ExponentSpec::Linear { slope, .. } => slope.abs() * r,
        }
    }

    /// `(inf, sup)` of `p` over the given nodes and cells.
    pub fn range_on(&self, grid: &Grid, nodes: &[usize], cells: &[usize]) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in nodes
            .iter()
            .map(|&k| grid.coords[k])
            .chain(cells.iter().map(|&c| grid.cells[c].center))
        {
            let v = self.eval(p);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ModulusSource<'a> {
    ClosedForm,
    /// Pairwise sampling over (a subsample of) the grid nodes.
    BruteForce(&'a Grid),
}

#[derive(Clone, Debug)]
pub struct LogHolderReport {
    pub sup_ratio: f64,
    pub worst_radius: f64,
    pub delta: f64,
    pub pass: bool,
    pub sweep: Vec<(f64, f64)>,
}

/// Empirical modulus from node pairs: returns sorted `(distance, running max)`.
pub fn empirical_modulus(field: &ExponentField, grid: &Grid, max_points: usize) -> Vec<(f64, f64)> {
    let nodes: Vec<usize> = (0..grid.node_count())
        .filter(|&k| grid.flags[k] != NodeFlag::Exterior)
        .collect();
    let stride = nodes.len().div_ceil(max_points.max(2)).max(1);
    let pts: Vec<(Point, f64)> = nodes
        .iter()
        .step_by(stride)
        .map(|&k| (grid.coords[k], field.eval(grid.coords[k])))
        .collect();
    let mut pairs = Vec::with_capacity(pts.len() * pts.len() / 2);
    for a in 0..pts.len() {
        for b in (a + 1)..pts.len() {
            pairs.push((dist(pts[a].0, pts[b].0), (pts[a].1 - pts[b].1).abs()));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut run = 0.0f64;
    for p in pairs.iter_mut() {
        run = run.max(p.1);
        p.1 = run;
    }
    pairs
}

pub fn modulus_lookup(table: &[(f64, f64)], r: f64) -> f64 {
    let idx = table.partition_point(|p| p.0 <= r);
    if idx == 0 {
        0.0
    } else {
        table[idx - 1].1
    }
}

pub fn check_log_holder(field: &ExponentField, big_r: f64, delta: f64, source: ModulusSource) -> Result<LogHolderReport> {
    if !(big_r > 0.0 && big_r < 1.0) {
        return Err(LabError::InvalidArgument(format!("scale R = {big_r} must lie in (0,1)")));
    }
    if !(delta > 0.0 && delta <= 0.125) {
        return Err(LabError::InvalidArgument(format!("delta = {delta} must lie in (0, 1/8]")));
    }
    let (radii, table): (Vec<f64>, Option<Vec<(f64, f64)>>) = match source {
        ModulusSource::ClosedForm => ((0..=160).map(|k| big_r * 2f64.powf(-k as f64 / 4.0)).collect(), None),
        ModulusSource::BruteForce(grid) => {
            let table = empirical_modulus(field, grid, 1500);
            let r_min = grid.h.min(big_r);
            let count = 64;
            let radii = (0..count)
                .map(|k| big_r * (r_min / big_r).powf(k as f64 / (count - 1) as f64))
                .collect();
            (radii, Some(table))
        }
    };
    let mut sweep = Vec::with_capacity(radii.len());
    let mut sup = 0.0f64;
    let mut worst = radii[0];
    for &r in &radii {
        let w = match &table {
            None => field.modulus(r),
            Some(t) => modulus_lookup(t, r),
        };
        let ratio = w * (1.0 / r).ln();
        if ratio > sup {
            sup = ratio;
            worst = r;
        }
        sweep.push((r, ratio));
    }
    Ok(LogHolderReport {
        sup_ratio: sup,
        worst_radius: worst,
        delta,
        pass: sup <= delta,
        sweep,
    })
}

/// Registered weight functions `gamma(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightSpec {
    Constant {
        value: f64,
    },
    /// `base + jump * sign(x_1 - interface)`, with `sign(0) = 0`.
    Step {
        base: f64,
        jump: f64,
        #[serde(default = "half")]
        interface: f64,
    },
    Sin {
        base: f64,
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
    },
}

fn half() -> f64 {
    0.5
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::Constant { value: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct WeightField {
    pub spec: WeightSpec,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl WeightField {
    pub fn new(spec: WeightSpec) -> Result<Self> {
        let (lo, hi) = match &spec {
            WeightSpec::Constant { value } => (*value, *value),
            WeightSpec::Step { base, jump, .. } => (base - jump.abs(), base + jump.abs()),
            WeightSpec::Sin { base, amplitude, .. } => (base - amplitude.abs(), base + amplitude.abs()),
        };
        if !(lo > 0.0) || !hi.is_finite() {
            return Err(LabError::InvalidArgument(format!(
                "weight range [{lo}, {hi}] must be positive and finite"
            )));
        }
        Ok(WeightField {
            spec,
            gamma_min: lo,
            gamma_max: hi,
        })
    }

    pub fn unit() -> Self {
        Self::new(WeightSpec::default()).expect("unit weight")
    }

    #[inline]
    pub fn eval(&self, x: Point) -> f64 {
        match &self.spec {
            WeightSpec::Constant { value } => *value,
            WeightSpec::Step { base, jump, interface } => {
                let d = x[0] - interface;
                let s = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                base + jump * s
            }
            WeightSpec::Sin {
                base,
                amplitude,
                frequency,
            } => base + amplitude * (2.0 * std::f64::consts::PI * frequency * x[0]).sin(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.spec, WeightSpec::Constant { .. })
    }
}

/// `gamma (|xi|^2 + eps^2)^{(p-2)/2} xi`, exactly zero at `xi = 0`.
#[inline]
pub fn flux_kernel(gamma: f64, p: f64, eps2: f64, xi: Point) -> Point {
    let s = xi[0] * xi[0] + xi[1] * xi[1];
    if s == 0.0 {
        return [0.0, 0.0];
    }
    let f = if p == 2.0 {
        gamma
    } else {
        gamma * (s + eps2).powf(0.5 * (p - 2.0))
    };
    [f * xi[0], f * xi[1]]
}

/// Analytic Jacobian of [`flux_kernel`] in `xi`.
pub fn flux_kernel_jacobian(gamma: f64, p: f64, eps2: f64, xi: Point) -> [[f64; 2]; 2] {
    let s0 = xi[0] * xi[0] + xi[1] * xi[1];
    let s = s0 + eps2;
    if s == 0.0 {
        return [[0.0; 2]; 2];
    }
    let base = gamma * s.powf(0.5 * (p - 2.0));
    let c = (p - 2.0) / s;
    [
        [base * (1.0 + c * xi[0] * xi[0]), base * c * xi[0] * xi[1]],
        [base * c * xi[1] * xi[0], base * (1.0 + c * xi[1] * xi[1])],
    ]
}

/// Spatially varying coefficients `(gamma, p)` of a flux of model type.
pub trait Coefficients: Sync {
    fn at(&self, x: Point) -> (f64, f64);
    fn eps_reg(&self) -> f64;
}

#[derive(Clone, Debug)]
pub struct Flux {
    pub exponent: ExponentField,
    pub weight: WeightField,
    pub eps_reg: f64,
    /// Declared growth constant.
    pub lambda1: f64,
    /// Declared ellipticity constant.
    pub lambda2: f64,
}

impl Flux {
    /// `eps_reg` defaults to `1e-8` when `p^- < 2` and to zero otherwise.
    pub fn new(exponent: ExponentField, weight: WeightField, eps_reg: Option<f64>) -> Self {
        let eps_reg = eps_reg.unwrap_or(if exponent.p_minus < 2.0 { 1e-8 } else { 0.0 });
        let lambda1 = weight.gamma_max * (1.0 + (exponent.p_plus - 1.0).max(1.0));
        let lambda2 = weight.gamma_min * (exponent.p_minus - 1.0).min(1.0);
        Flux {
            exponent,
            weight,
            eps_reg,
            lambda1,
            lambda2,
        }
    }

    pub fn p_laplacian(p: f64, dim: usize) -> Result<Self> {
        Ok(Self::new(ExponentField::constant(p, dim)?, WeightField::unit(), None))
    }

    pub fn with_declared(mut self, lambda1: Option<f64>, lambda2: Option<f64>) -> Self {
        if let Some(l) = lambda1 {
            self.lambda1 = l;
        }
        if let Some(l) = lambda2 {
            self.lambda2 = l;
        }
        self
    }

    pub fn is_pure(&self) -> bool {
        matches!(self.weight.spec, WeightSpec::Constant { value } if value == 1.0)
    }

    #[inline]
    pub fn eval(&self, xi: Point, x: Point) -> Point {
        flux_kernel(self.weight.eval(x), self.exponent.eval(x), self.eps_reg * self.eps_reg, xi)
    }

    pub fn jacobian(&self, xi: Point, x: Point) -> [[f64; 2]; 2] {
        flux_kernel_jacobian(self.weight.eval(x), self.exponent.eval(x), self.eps_reg * self.eps_reg, xi)
    }

    /// Central-difference Jacobian with step `1e-6 max(1, |xi|)`.
    pub fn jacobian_fd(&self, xi: Point, x: Point) -> [[f64; 2]; 2] {
        let h = 1e-6 * (xi[0].hypot(xi[1])).max(1.0);
        let mut j = [[0.0; 2]; 2];
        for col in 0..2 {
            let mut a = xi;
            let mut b = xi;
            a[col] += h;
            b[col] -= h;
            let fa = self.eval(a, x);
            let fb = self.eval(b, x);
            for row in 0..2 {
                j[row][col] = (fa[row] - fb[row]) / (2.0 * h);
            }
        }
        j
    }
}

impl Coefficients for Flux {
    #[inline]
    fn at(&self, x: Point) -> (f64, f64) {
        (self.weight.eval(x), self.exponent.eval(x))
    }

    fn eps_reg(&self) -> f64 {
        self.eps_reg
    }
}

fn op_norm(m: [[f64; 2]; 2]) -> f64 {
    // Largest singular value of a 2x2 matrix.
    let (a, b, c, d) = (m[0][0], m[0][1], m[1][0], m[1][1]);
    let s1 = a * a + b * b + c * c + d * d;
    let det = a * d - b * c;
    let disc = (s1 * s1 - 4.0 * det * det).max(0.0).sqrt();
    (0.5 * (s1 + disc)).sqrt()
}

/// Left and right sides of the monotonicity inequality (without the
/// constant) for one pair.
pub fn monotonicity_terms(flux: &Flux, xi: Point, eta: Point, x: Point) -> (f64, f64) {
    let a = flux.eval(xi, x);
    let b = flux.eval(eta, x);
    let d = [xi[0] - eta[0], xi[1] - eta[1]];
    let lhs = (a[0] - b[0]) * d[0] + (a[1] - b[1]) * d[1];
    let dn2 = d[0] * d[0] + d[1] * d[1];
    if dn2 == 0.0 {
        return (0.0, 0.0);
    }
    let p = flux.exponent.eval(x);
    let rhs = if p >= 2.0 {
        dn2.powf(0.5 * p)
    } else {
        let s = xi[0] * xi[0] + xi[1] * xi[1] + eta[0] * eta[0] + eta[1] * eta[1];
        s.powf(0.5 * (p - 2.0)) * dn2
    };
    (lhs, rhs)
}

#[derive(Clone, Debug)]
pub struct StructureReport {
    pub samples: usize,
    pub lambda1_emp: f64,
    pub lambda2_emp: f64,
    pub lambda_tilde_emp: f64,
    /// Largest relative gap between the analytic and finite-difference Jacobians.
    pub jacobian_gap: f64,
    pub violations: Vec<String>,
}

fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Point {
    let mag = 10f64.powf(rng.random_range(-3.0..3.0));
    if dim == 1 {
        let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        [s * mag, 0.0]
    } else {
        let th = rng.random_range(0.0..std::f64::consts::TAU);
        [mag * th.cos(), mag * th.sin()]
    }
}

pub fn verify_structure(flux: &Flux, grid: &Grid, sample_count: usize, seed: u64) -> Result<StructureReport> {
    if sample_count == 0 {
        return Err(LabError::InvalidArgument("sample_count must be at least 1".into()));
    }
    let nodes: Vec<usize> = (0..grid.node_count())
        .filter(|&k| grid.flags[k] != NodeFlag::Exterior)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = grid.dim;
    let mut l1 = 0.0f64;
    let mut l2 = f64::INFINITY;
    let mut lt = f64::INFINITY;
    let mut gap = 0.0f64;
    // Relative tolerance absorbing the central-difference error.
    let fd_tol = 1e-5;
    for _ in 0..sample_count {
        let x = grid.coords[nodes[rng.random_range(0..nodes.len())]];
        let xi = random_vector(&mut rng, dim);
        let eta = random_vector(&mut rng, dim);
        let p = flux.exponent.eval(x);
        let n = xi[0].hypot(xi[1]);

        let a = flux.eval(xi, x);
        let jac = flux.jacobian(xi, x);
        let fd = flux.jacobian_fd(xi, x);
        let scale = op_norm(jac).max(1e-300);
        let mut diff = [[0.0; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                diff[r][c] = jac[r][c] - fd[r][c];
            }
        }
        if dim == 1 {
            diff[0][1] = 0.0;
            diff[1][0] = 0.0;
            diff[1][1] = 0.0;
        }
        gap = gap.max(op_norm(diff) / scale);

        let jnorm = if dim == 1 { fd[0][0].abs() } else { op_norm(fd) };
        l1 = l1.max((a[0].hypot(a[1]) + n * jnorm) / n.powf(p - 1.0));

        let e2 = eta[0] * eta[0] + eta[1] * eta[1];
        let quad = eta[0] * (fd[0][0] * eta[0] + fd[0][1] * eta[1]) + eta[1] * (fd[1][0] * eta[0] + fd[1][1] * eta[1]);
        l2 = l2.min(quad / (n.powf(p - 2.0) * e2));

        let (lhs, rhs) = monotonicity_terms(flux, xi, eta, x);
        if rhs > 0.0 {
            lt = lt.min(lhs / rhs);
        }
    }
    let mut violations = Vec::new();
    if l1 > flux.lambda1 * (1.0 + fd_tol) {
        violations.push(format!("growth: empirical {l1} exceeds declared Lambda_1 = {}", flux.lambda1));
    }
    if l2 < flux.lambda2 * (1.0 - fd_tol) {
        violations.push(format!("ellipticity: empirical {l2} below declared Lambda_2 = {}", flux.lambda2));
    }
    if !(lt > 0.0) {
        violations.push(format!("monotonicity: empirical constant {lt} is not positive"));
    }
    if gap > fd_tol {
        violations.push(format!("jacobian: analytic and finite-difference differ by {gap:e}"));
    }
    Ok(StructureReport {
        samples: sample_count,
        lambda1_emp: l1,
        lambda2_emp: l2,
        lambda_tilde_emp: lt,
        jacobian_gap: gap,
        violations,
    })
}

/// 32 directions times log-spaced magnitudes `1e-3 .. 1e3` (2 directions in 1-D).
pub fn xi_samples(dim: usize) -> Vec<Point> {
    let mags: Vec<f64> = (0..=12).map(|k| 10f64.powf(-3.0 + 0.5 * k as f64)).collect();
    let dirs: Vec<Point> = if dim == 1 {
        vec![[1.0, 0.0], [-1.0, 0.0]]
    } else {
        (0..32)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / 32.0;
                [t.cos(), t.sin()]
            })
            .collect()
    };
    let mut out = Vec::with_capacity(mags.len() * dirs.len());
    for d in &dirs {
        for &m in &mags {
            out.push([m * d[0], m * d[1]]);
        }
    }
    out
}

/// Mean over the cells of `Omega ∩ B_r(y)` of `theta(a, B_r(y))`. The closed
/// form `|gamma - mean gamma|` is exact when `eps_reg = 0`; otherwise the
/// supremum over `xi` is sampled.
pub fn theta_ball(flux: &Flux, grid: &Grid, y: Point, r: f64, sampled: bool) -> f64 {
    let cells = grid.cells_in_ball(y, r);
    theta_on_cells(flux, grid, &cells, sampled)
}

pub fn theta_on_cells(flux: &Flux, grid: &Grid, cells: &[usize], sampled: bool) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    let area: f64 = grid.cells_area(cells);
    if !sampled {
        let gamma: Vec<f64> = cells.iter().map(|&c| flux.weight.eval(grid.cells[c].center)).collect();
        // Offsetting by the first value keeps constant weights exactly at zero.
        let g0 = gamma[0];
        let mean = g0 + cells.iter().zip(&gamma).map(|(&c, g)| (g - g0) * grid.cells[c].area).sum::<f64>() / area;
        return cells
            .iter()
            .zip(&gamma)
            .map(|(&c, g)| (g - mean).abs() * grid.cells[c].area)
            .sum::<f64>()
            / area;
    }
    let mut theta = vec![0.0f64; cells.len()];
    let mut quot = vec![[0.0; 2]; cells.len()];
    for xi in xi_samples(grid.dim) {
        let n = xi[0].hypot(xi[1]);
        let mut mean = [0.0; 2];
        for (q, &c) in quot.iter_mut().zip(cells) {
            let x = grid.cells[c].center;
            let a = flux.eval(xi, x);
            let s = n.powf(flux.exponent.eval(x) - 1.0);
            *q = [a[0] / s, a[1] / s];
            mean[0] += q[0] * grid.cells[c].area;
            mean[1] += q[1] * grid.cells[c].area;
        }
        mean = [mean[0] / area, mean[1] / area];
        for (t, q) in theta.iter_mut().zip(&quot) {
            *t = t.max((q[0] - mean[0]).hypot(q[1] - mean[1]));
        }
    }
    cells
        .iter()
        .zip(&theta)
        .map(|(&c, t)| t * grid.cells[c].area)
        .sum::<f64>()
        / area
}

#[derive(Clone, Debug)]
pub struct BmoReport {
    pub sup_average: f64,
    pub center: Point,
    pub radius: f64,
}

/// Largest ball average of `theta` over a sweep of centers (a node
/// subsample) and radii `h sqrt(2)^k <= R`.
pub fn bmo_oscillation(flux: &Flux, grid: &Grid, big_r: f64) -> Result<BmoReport> {
    if !(big_r > 0.0) {
        return Err(LabError::InvalidArgument(format!("R = {big_r} must be positive")));
    }
    let sampled = flux.eps_reg != 0.0;
    let nodes: Vec<usize> = (0..grid.node_count())
        .filter(|&k| grid.flags[k] != NodeFlag::Exterior)
        .collect();
    let stride = nodes.len().div_ceil(if sampled { 64 } else { 400 }).max(1);
    let mut radii = Vec::new();
    let mut r = grid.h;
    while r <= big_r * (1.0 + 1e-12) {
        radii.push(r);
        r *= std::f64::consts::SQRT_2;
    }
    if radii.is_empty() {
        radii.push(big_r);
    }
    let mut best = BmoReport {
        sup_average: 0.0,
        center: grid.coords[nodes[0]],
        radius: radii[0],
    };
    for &k in nodes.iter().step_by(stride) {
        let y = grid.coords[k];
        for &r in &radii {
            let v = theta_ball(flux, grid, y, r, sampled);
            if v > best.sup_average {
                best = BmoReport {
                    sup_average: v,
                    center: y,
                    radius: r,
                };
            }
        }
    }
    Ok(best)
}

/// Frozen flux `xi -> mean_{B^+} gamma * (|xi|^2 + eps^2)^{(p2-2)/2} xi`.
#[derive(Clone, Debug)]
pub struct FrozenFlux {
    pub p1: f64,
    pub p2: f64,
    pub gamma_bar: f64,
    pub eps_reg: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// `(gamma, p, area)` on the upper half-window cells.
    samples: Vec<(f64, f64, f64)>,
}

impl FrozenFlux {
    pub fn eval(&self, xi: Point) -> Point {
        flux_kernel(self.gamma_bar, self.p2, self.eps_reg * self.eps_reg, xi)
    }

    pub fn jacobian(&self, xi: Point) -> [[f64; 2]; 2] {
        flux_kernel_jacobian(self.gamma_bar, self.p2, self.eps_reg * self.eps_reg, xi)
    }

    /// Direct cell average of `a(xi, x) |xi|^{p2 - p(x)}`.
    pub fn literal_eval(&self, xi: Point) -> Point {
        let n = xi[0].hypot(xi[1]);
        if n == 0.0 {
            return [0.0, 0.0];
        }
        let e2 = self.eps_reg * self.eps_reg;
        let mut acc = [0.0; 2];
        let mut area = 0.0;
        for &(g, p, a) in &self.samples {
            let v = flux_kernel(g, p, e2, xi);
            let s = n.powf(self.p2 - p);
            acc[0] += a * v[0] * s;
            acc[1] += a * v[1] * s;
            area += a;
        }
        [acc[0] / area, acc[1] / area]
    }

    /// Sampled check of the frozen growth bounds against `3 Lambda_1` and
    /// `Lambda_2 / 2`; returns `(max growth ratio, min ellipticity ratio)`.
    pub fn growth_ratios(&self, dim: usize, samples: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = 0.0f64;
        let mut e = f64::INFINITY;
        for _ in 0..samples {
            let xi = random_vector(&mut rng, dim);
            let eta = random_vector(&mut rng, dim);
            let n = xi[0].hypot(xi[1]);
            let b = self.eval(xi);
            let j = self.jacobian(xi);
            let jn = if dim == 1 { j[0][0].abs() } else { op_norm(j) };
            g = g.max((b[0].hypot(b[1]) + n * jn) / (3.0 * self.lambda1 * n.powf(self.p2 - 1.0)));
            let quad = eta[0] * (j[0][0] * eta[0] + j[0][1] * eta[1]) + eta[1] * (j[1][0] * eta[0] + j[1][1] * eta[1]);
            let e2 = eta[0] * eta[0] + eta[1] * eta[1];
            e = e.min(quad / (0.5 * self.lambda2 * n.powf(self.p2 - 2.0) * e2));
        }
        (g, e)
    }
}

impl Coefficients for FrozenFlux {
    fn at(&self, _x: Point) -> (f64, f64) {
        (self.gamma_bar, self.p2)
    }

    fn eps_reg(&self) -> f64 {
        self.eps_reg
    }
}

/// Freezes the flux on the window `Omega_{8r}` (radius `window.radius = 8r`);
/// the average is taken over the upper half-ball `B_{8r}^+`.
pub fn freeze_flux(flux: &Flux, grid: &Grid, window: &SubWindow) -> Result<FrozenFlux> {
    if window.normal.is_none() {
        return Err(LabError::Precondition(
            "window has no flat half-space template; the geometric setting fails".into(),
        ));
    }
    let (p1, p2) = flux.exponent.range_on(grid, &window.nodes, &window.cells);
    let bound = flux.exponent.modulus(2.0 * window.radius);
    if p2 - p1 > bound + 1e-12 {
        return Err(LabError::ExponentOscillation {
            oscillation: p2 - p1,
            bound,
        });
    }
    let upper = window.upper_cells(grid, window.radius);
    if upper.is_empty() {
        return Err(LabError::Precondition("upper half-window contains no cells".into()));
    }
    let samples: Vec<(f64, f64, f64)> = upper
        .iter()
        .map(|&c| {
            let x = grid.cells[c].center;
            (flux.weight.eval(x), flux.exponent.eval(x), grid.cells[c].area)
        })
        .collect();
    let area: f64 = samples.iter().map(|s| s.2).sum();
    let gamma_bar = samples.iter().map(|s| s.0 * s.2).sum::<f64>() / area;
    Ok(FrozenFlux {
        p1,
        p2,
        gamma_bar,
        eps_reg: flux.eps_reg,
        lambda1: flux.lambda1,
        lambda2: flux.lambda2,
        samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LuxemburgReport {
    pub modular: f64,
    pub norm: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `sum_c |f_c|^{p(x_c)} area_c`.
pub fn modular(values: &CellField, field: &ExponentField, grid: &Grid) -> f64 {
    values
        .values
        .iter()
        .zip(&grid.cells)
        .map(|(v, c)| {
            let a = v.abs();
            if a == 0.0 {
                0.0
            } else {
                a.powf(field.eval(c.center)) * c.area
            }
        })
        .sum()
}

pub fn luxemburg_cells(values: &CellField, field: &ExponentField, grid: &Grid) -> LuxemburgReport {
    let rho = modular(values, field, grid);
    let (pm, pp) = (field.p_minus, field.p_plus);
    let lower = rho.powf(1.0 / pm).min(rho.powf(1.0 / pp));
    let upper = rho.powf(1.0 / pm).max(rho.powf(1.0 / pp));
    if rho == 0.0 {
        return LuxemburgReport {
            modular: 0.0,
            norm: 0.0,
            lower: 0.0,
            upper: 0.0,
        };
    }
    let pc: Vec<(f64, f64, f64)> = values
        .values
        .iter()
        .zip(&grid.cells)
        .filter(|(v, _)| **v != 0.0)
        .map(|(v, c)| (v.abs(), field.eval(c.center), c.area))
        .collect();
    let scaled = |t: f64| pc.iter().map(|&(a, p, w)| (a / t).powf(p) * w).sum::<f64>();
    let mut lo = lower;
    let mut hi = upper;
    while scaled(lo) < 1.0 {
        lo *= 0.5;
    }
    while scaled(hi) > 1.0 {
        hi *= 2.0;
    }
    let mut t = 0.5 * (lo + hi);
    for _ in 0..400 {
        t = 0.5 * (lo + hi);
        let m = scaled(t);
        if (m - 1.0).abs() <= 1e-10 || hi - lo <= f64::EPSILON * hi {
            break;
        }
        if m > 1.0 {
            lo = t;
        } else {
            hi = t;
        }
    }
    LuxemburgReport {
        modular: rho,
        norm: t,
        lower,
        upper,
    }
}

/// Modular and Luxemburg norm of a nodal function (cell value = mean of the
/// corner magnitudes).
pub fn modular_and_luxemburg(f: &GridFunction, field: &ExponentField, grid: &Grid) -> LuxemburgReport {
    luxemburg_cells(&CellField::abs_corner_mean(grid, f), field, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, window, DomainKind};

    fn square(n: usize) -> Grid {
        build_grid(DomainKind::UnitSquare, n).unwrap()
    }

    #[test]
    fn eval_examples() {
        let f = Flux::p_laplacian(2.0, 2).unwrap();
        assert_eq!(f.eval([3.0, 4.0], [0.5, 0.5]), [3.0, 4.0]);
        let f = Flux::p_laplacian(3.0, 2).unwrap();
        assert_eq!(f.eps_reg, 0.0);
        assert_eq!(f.eval([2.0, 0.0], [0.1, 0.1]), [4.0, 0.0]);
        assert_eq!(f.eval([0.0, 0.0], [0.1, 0.1]), [0.0, 0.0]);
        let f = Flux::p_laplacian(1.7, 2).unwrap();
        assert_eq!(f.eval([0.0, 0.0], [0.1, 0.1]), [0.0, 0.0]);
        assert_eq!(f.eps_reg, 1e-8);
    }

    #[test]
    fn exponent_range_enforced() {
        assert!(ExponentField::constant(1.4, 2).is_err());
        assert!(ExponentField::constant(1.6, 2).is_ok());
        assert!(ExponentField::constant(1.01, 1).is_ok());
        assert!(WeightField::new(WeightSpec::Step { base: 0.1, jump: 0.2, interface: 0.5 }).is_err());
    }

    #[test]
    fn homogeneity() {
        let f = Flux::p_laplacian(2.7, 2).unwrap();
        let xi = [0.3, -1.2];
        for t in [0.01, 0.5, 3.0, 100.0] {
            let a = f.eval([t * xi[0], t * xi[1]], [0.0, 0.0]);
            let b = f.eval(xi, [0.0, 0.0]);
            let s = t.powf(1.7);
            for i in 0..2 {
                assert!((a[i] - s * b[i]).abs() <= 1e-12 * a[i].abs().max(1e-300));
            }
        }
    }

    #[test]
    fn log_holder_examples() {
        let c = ExponentField::constant(2.0, 2).unwrap();
        let r = check_log_holder(&c, 0.5, 0.01, ModulusSource::ClosedForm).unwrap();
        assert_eq!(r.sup_ratio, 0.0);
        assert!(r.pass);

        let log = ExponentField::new(
            ExponentSpec::Log {
                base: 2.0,
                amplitude: 0.5,
                center: [0.0, 0.0],
                cap: default_cap(),
            },
            2,
            (0.0, 1.0),
        )
        .unwrap();
        let r = check_log_holder(&log, 0.1, 0.125, ModulusSource::ClosedForm).unwrap();
        assert!(r.sup_ratio >= 0.5 - 1e-12);
        assert!(!r.pass);
        assert!(check_log_holder(&log, 1.5, 0.1, ModulusSource::ClosedForm).is_err());
    }

    #[test]
    fn sin_modulus_matches_pairs() {
        let g = square(33);
        let f = ExponentField::new(
            ExponentSpec::Sin {
                base: 2.0,
                amplitude: 0.3,
                frequency: 1.0,
            },
            2,
            (0.0, 1.0),
        )
        .unwrap();
        let table = empirical_modulus(&f, &g, 2000);
        for r in [0.05, 0.1, 0.2, 0.4, 0.7] {
            let emp = modulus_lookup(&table, r);
            let closed = f.modulus(r);
            assert!(emp <= closed + 1e-12);
            assert!(emp >= closed - 0.3 * 2.0 * std::f64::consts::PI * g.h);
            assert!(closed <= (0.6f64).min(0.3 * 2.0 * std::f64::consts::PI * r) + 1e-12);
        }
        let bf = check_log_holder(&f, 0.5, 0.125, ModulusSource::BruteForce(&g)).unwrap();
        let cf = check_log_holder(&f, 0.5, 0.125, ModulusSource::ClosedForm).unwrap();
        assert!(bf.sup_ratio <= cf.sup_ratio + 1e-9);
    }

    #[test]
    fn structure_linear_case() {
        let g = square(9);
        let f = Flux::p_laplacian(2.0, 2).unwrap();
        let rep = verify_structure(&f, &g, 2000, 7).unwrap();
        assert!((rep.lambda_tilde_emp - 1.0).abs() < 1e-9);
        assert!(rep.violations.is_empty(), "{:?}", rep.violations);
        assert_eq!(monotonicity_terms(&f, [1.0, 2.0], [1.0, 2.0], [0.0, 0.0]), (0.0, 0.0));
    }

    #[test]
    fn structure_p3() {
        let g = square(9);
        let f = Flux::p_laplacian(3.0, 2).unwrap();
        let rep = verify_structure(&f, &g, 10_000, 11).unwrap();
        assert!(rep.violations.is_empty(), "{:?}", rep.violations);
        // 2^{2-p} is the sharp constant for p >= 2, attained at eta = -xi.
        assert!(rep.lambda_tilde_emp >= 0.5 - 1e-9 && rep.lambda_tilde_emp < 1.0);
        let (l, r) = monotonicity_terms(&f, [1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]);
        assert!((l / r - 0.5).abs() < 1e-14);
    }

    #[test]
    fn structure_variable() {
        let g = square(17);
        let e = ExponentField::new(
            ExponentSpec::Sin {
                base: 1.8,
                amplitude: 0.15,
                frequency: 1.0,
            },
            2,
            (0.0, 1.0),
        )
        .unwrap();
        let w = WeightField::new(WeightSpec::Step {
            base: 1.0,
            jump: 0.2,
            interface: 0.5,
        })
        .unwrap();
        let f = Flux::new(e, w, None);
        let rep = verify_structure(&f, &g, 5000, 3).unwrap();
        assert!(rep.violations.is_empty(), "{:?}", rep.violations);
        assert!(rep.lambda1_emp <= f.lambda1 * (1.0 + 1e-5) && rep.lambda2_emp >= f.lambda2 * (1.0 - 1e-5));
    }

    #[test]
    fn understated_lambda_is_flagged() {
        let g = square(9);
        let f = Flux::p_laplacian(3.0, 2).unwrap().with_declared(Some(1.0), None);
        let rep = verify_structure(&f, &g, 100, 1).unwrap();
        assert!(!rep.violations.is_empty());
    }

    #[test]
    fn bmo_examples() {
        let g = square(33);
        let f = Flux::p_laplacian(2.0, 2).unwrap();
        assert_eq!(bmo_oscillation(&f, &g, 0.3).unwrap().sup_average, 0.0);

        let e = ExponentField::constant(2.0, 2).unwrap();
        let w = WeightField::new(WeightSpec::Step {
            base: 1.0,
            jump: 0.1,
            interface: 0.5,
        })
        .unwrap();
        let f = Flux::new(e, w, None);
        let th = theta_ball(&f, &g, [0.5, 0.5], 0.2, false);
        assert!((th - 0.1).abs() < 1e-12);
        let ths = theta_ball(&f, &g, [0.5, 0.5], 0.2, true);
        assert!((ths - 0.1).abs() < 1e-12);
        assert_eq!(theta_ball(&f, &g, [0.2, 0.5], 0.2, false), 0.0);
    }

    #[test]
    fn freeze_identity_and_average() {
        let g = square(33);
        let f = Flux::p_laplacian(2.5, 2).unwrap();
        let w = window(&g, [0.5, 0.0], 0.4).unwrap();
        let fr = freeze_flux(&f, &g, &w).unwrap();
        assert_eq!(fr.p2, 2.5);
        for xi in xi_samples(2) {
            let a = f.eval(xi, [0.3, 0.2]);
            let b = fr.eval(xi);
            let dev = (a[0] - b[0]).hypot(a[1] - b[1]);
            assert!(dev <= 1e-12 * a[0].hypot(a[1]).max(1.0));
        }

        let e = ExponentField::constant(2.0, 2).unwrap();
        let wt = WeightField::new(WeightSpec::Sin {
            base: 1.0,
            amplitude: 0.3,
            frequency: 1.0,
        })
        .unwrap();
        let f = Flux::new(e, wt, None);
        let fr = freeze_flux(&f, &g, &w).unwrap();
        let cells = w.upper_cells(&g, 0.4);
        let mean = cells.iter().map(|&c| f.weight.eval(g.cells[c].center)).sum::<f64>() / cells.len() as f64;
        assert!((fr.gamma_bar - mean).abs() < 1e-12);
        let xi = [0.7, -0.2];
        let (a, b) = (fr.eval(xi), fr.literal_eval(xi));
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        let (gr, el) = fr.growth_ratios(2, 2000, 5);
        assert!(gr <= 1.0 && el >= 1.0);
    }

    #[test]
    fn freeze_variable_exponent() {
        let g = square(33);
        let e = ExponentField::new(
            ExponentSpec::Sin {
                base: 2.0,
                amplitude: 0.3,
                frequency: 1.0,
            },
            2,
            (0.0, 1.0),
        )
        .unwrap();
        let f = Flux::new(e, WeightField::unit(), None);
        let w = window(&g, [0.5, 0.0], 0.4).unwrap();
        let fr = freeze_flux(&f, &g, &w).unwrap();
        assert!(fr.p2 - fr.p1 <= f.exponent.modulus(0.8));
        assert!(fr.p1 < fr.p2);
        let (gr, el) = fr.growth_ratios(2, 2000, 9);
        assert!(gr <= 1.0 && el >= 1.0);
    }

    #[test]
    fn luxemburg_examples() {
        let g = square(33);
        let p = ExponentField::constant(3.0, 2).unwrap();
        let f = GridFunction::from_fn(&g, |x| x[0] + 2.0 * x[1]);
        let rep = modular_and_luxemburg(&f, &p, &g);
        assert!((rep.norm - rep.modular.powf(1.0 / 3.0)).abs() < 1e-9);
        let z = GridFunction::zeros(&g);
        let rep = modular_and_luxemburg(&z, &p, &g);
        assert_eq!((rep.modular, rep.norm), (0.0, 0.0));
    }
}
