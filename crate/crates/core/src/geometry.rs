//! Exact ball/cell intersection measures used by the quadrature routines.

use std::f64::consts::PI;

pub type Point = [f64; 2];

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Lebesgue measure of the `dim`-dimensional ball of radius `r`.
#[inline]
pub fn ball_volume(dim: usize, r: f64) -> f64 {
    match dim {
        1 => 2.0 * r,
        _ => PI * r * r,
    }
}

/// Antiderivative of `sqrt(r^2 - x^2)`.
fn half_chord_primitive(r: f64, x: f64) -> f64 {
    let s = (r * r - x * x).max(0.0).sqrt();
    0.5 * (x * s + r * r * (x / r).clamp(-1.0, 1.0).asin())
}

/// Area of the intersection of the disc of radius `r` centered at the origin
/// with the rectangle `[x0, x1] x [y0, y1]`.
pub fn disc_rect_area(r: f64, x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    if r <= 0.0 || x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let a = x0.max(-r);
    let b = x1.min(r);
    if b <= a || y0 >= r || y1 <= -r {
        return 0.0;
    }
    // Fast path: rectangle entirely inside the disc.
    let far_x = x0.abs().max(x1.abs());
    let far_y = y0.abs().max(y1.abs());
    if far_x * far_x + far_y * far_y <= r * r {
        return (x1 - x0) * (y1 - y0);
    }

    let mut knots = [a, b, 0.0, 0.0, 0.0, 0.0];
    let mut len = 2;
    for y in [y0, y1] {
        if y.abs() < r {
            let xs = (r * r - y * y).sqrt();
            for x in [-xs, xs] {
                if x > a && x < b {
                    knots[len] = x;
                    len += 1;
                }
            }
        }
    }
    let knots = &mut knots[..len];
    knots.sort_by(|p, q| p.partial_cmp(q).unwrap());

    let mut area = 0.0;
    for w in knots.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi <= lo {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let s = (r * r - mid * mid).max(0.0).sqrt();
        let top_is_arc = s < y1;
        let bottom_is_arc = -s > y0;
        let top_mid = if top_is_arc { s } else { y1 };
        let bottom_mid = if bottom_is_arc { -s } else { y0 };
        if top_mid <= bottom_mid {
            continue;
        }
        let arc = half_chord_primitive(r, hi) - half_chord_primitive(r, lo);
        let span = hi - lo;
        let top = if top_is_arc { arc } else { y1 * span };
        let bottom = if bottom_is_arc { -arc } else { y0 * span };
        area += top - bottom;
    }
    area.max(0.0)
}

/// Measure of `B_r(center) ∩ box` where `box` is `[lo, hi]` per axis.
pub fn ball_box_measure(dim: usize, center: Point, r: f64, lo: Point, hi: Point) -> f64 {
    match dim {
        1 => {
            let a = (center[0] - r).max(lo[0]);
            let b = (center[0] + r).min(hi[0]);
            (b - a).max(0.0)
        }
        _ => disc_rect_area(
            r,
            lo[0] - center[0],
            hi[0] - center[0],
            lo[1] - center[1],
            hi[1] - center[1],
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sampled_area(r: f64, x0: f64, x1: f64, y0: f64, y1: f64, m: usize) -> f64 {
        let (dx, dy) = ((x1 - x0) / m as f64, (y1 - y0) / m as f64);
        let mut count = 0usize;
        for i in 0..m {
            for j in 0..m {
                let x = x0 + (i as f64 + 0.5) * dx;
                let y = y0 + (j as f64 + 0.5) * dy;
                if x * x + y * y < r * r {
                    count += 1;
                }
            }
        }
        count as f64 * dx * dy
    }

    #[test]
    fn full_disc() {
        let a = disc_rect_area(1.0, -2.0, 2.0, -2.0, 2.0);
        assert!((a - PI).abs() < 1e-14);
    }

    #[test]
    fn half_and_quarter_disc() {
        assert!((disc_rect_area(0.7, -1.0, 1.0, 0.0, 1.0) - PI * 0.49 / 2.0).abs() < 1e-14);
        assert!((disc_rect_area(0.7, 0.0, 1.0, 0.0, 1.0) - PI * 0.49 / 4.0).abs() < 1e-14);
    }

    #[test]
    fn matches_sampling() {
        let cases = [
            (1.0, 0.3, 0.9, -0.2, 0.5),
            (0.5, -0.6, 0.1, 0.2, 0.45),
            (2.0, 1.0, 1.9, 0.5, 1.5),
            (1.0, -0.1, 0.1, 0.95, 1.2),
            (0.3, -1.0, 1.0, -0.05, 0.05),
        ];
        for (r, x0, x1, y0, y1) in cases {
            let exact = disc_rect_area(r, x0, x1, y0, y1);
            let approx = sampled_area(r, x0, x1, y0, y1, 1500);
            assert!(
                (exact - approx).abs() < 2e-4 * (x1 - x0).max(y1 - y0),
                "{r} {x0} {x1} {y0} {y1}: {exact} vs {approx}"
            );
        }
    }

    #[test]
    fn disjoint_is_zero() {
        assert_eq!(disc_rect_area(1.0, 1.0, 2.0, 0.0, 1.0), 0.0);
        assert_eq!(disc_rect_area(1.0, 0.8, 2.0, 0.8, 1.0), 0.0);
    }
}
