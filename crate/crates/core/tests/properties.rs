use proptest::prelude::*;

use obstacle_lab::exponent::{luxemburg_cells, modular, monotonicity_terms, ExponentField, ExponentSpec, Flux};
use obstacle_lab::field::{CellField, GridFunction};
use obstacle_lab::geometry::dist;
use obstacle_lab::grid::{build_grid, window, DomainKind, Grid};
use obstacle_lab::maximal::{distribution_sum, frac_maximal_1, hl_maximal, phi_trunc, truncate, MaximalConfig, MaximalInput};
use obstacle_lab::measure::{l1_mass_check, Atom, MeasureData, MASS_TOL};
use obstacle_lab::report::fmt_f64;
use obstacle_lab::solver::{assemble, solve, ProblemSpec, SolveMode, SolverOptions};

fn square(n: usize) -> Grid {
    build_grid(DomainKind::UnitSquare, n).unwrap()
}

fn point() -> impl Strategy<Value = [f64; 2]> {
    (0.05..0.95f64, 0.05..0.95f64).prop_map(|(x, y)| [x, y])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn truncation_is_odd_bounded_and_lipschitz(t in -50.0..50.0f64, s in -50.0..50.0f64, k in 1e-3..20.0f64) {
        prop_assert!(truncate(t, k).abs() <= k);
        prop_assert_eq!(truncate(-t, k), -truncate(t, k));
        prop_assert!((truncate(t, k) - truncate(s, k)).abs() <= (t - s).abs());
        prop_assert!((phi_trunc(t, k) - phi_trunc(s, k)).abs() <= (t - s).abs());
        prop_assert!(phi_trunc(t, k).abs() <= 1.0);
        prop_assert_eq!(phi_trunc(-t, k), -phi_trunc(t, k));
        if t.abs() <= k {
            prop_assert_eq!(phi_trunc(t, k), 0.0);
        }
    }

    #[test]
    fn csv_floats_round_trip(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn flux_is_monotone(p in 1.55..4.0f64, a in prop::array::uniform2(-5.0..5.0f64), b in prop::array::uniform2(-5.0..5.0f64)) {
        let f = Flux::p_laplacian(p, 2).unwrap();
        let (lhs, _) = monotonicity_terms(&f, a, b, [0.5, 0.5]);
        prop_assert!(lhs >= -1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn luxemburg_norm_lies_in_sandwich(seed in any::<u64>(), amp in 0.0..0.4f64, scale in 1e-3..1e3f64) {
        let g = square(17);
        let p = ExponentField::new(ExponentSpec::Sin { base: 2.0, amplitude: amp, frequency: 1.0 }, 2, (0.0, 1.0)).unwrap();
        let f = CellField::from_fn(&g, |x| scale * ((seed % 97) as f64 * x[0] + x[1]).sin());
        let rep = luxemburg_cells(&f, &p, &g);
        prop_assert!(rep.lower <= rep.norm * (1.0 + 1e-9) && rep.norm <= rep.upper * (1.0 + 1e-9));
        if rep.norm > 0.0 {
            let m = modular(&f.map(|v| v / rep.norm), &p, &g);
            prop_assert!((m - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn mollified_mass_never_exceeds_variation(
        atoms in prop::collection::vec((point(), -2.0..2.0f64), 1..4),
        i in 2usize..12,
    ) {
        let g = square(33);
        let mu = MeasureData {
            atoms: atoms.into_iter().map(|(x, w)| Atom { x, w }).collect(),
            density: None,
        };
        for rep in l1_mass_check(&mu, &[i], &g).unwrap() {
            prop_assert!(rep.l1_norm <= rep.total_variation + MASS_TOL);
            prop_assert!(rep.deficit_explained);
        }
    }

    #[test]
    fn projected_solve_is_feasible_with_monotone_energy(
        a in point(), w in -3.0..3.0f64, lo in 0.001..0.05f64, hi in 0.001..0.05f64, p in 1.6..3.0f64,
    ) {
        let g = square(9);
        let f = Flux::p_laplacian(p, 2).unwrap();
        let zero = GridFunction::zeros(&g);
        let lower = GridFunction::constant(&g, -lo);
        let upper = GridFunction::constant(&g, hi);
        let mu = MeasureData::dirac(a, w);
        let mut spec = ProblemSpec::new(&g, &f, &zero);
        spec.mode = SolveMode::Double;
        spec.lower = Some(&lower);
        spec.upper = Some(&upper);
        spec.measure = Some(&mu);
        let vi = assemble(&spec).unwrap();
        let (u, rep) = solve(&vi, &SolverOptions::accelerated()).unwrap();
        prop_assert!(vi.is_feasible(&u, 0.0));
        prop_assert!(rep.energies.windows(2).all(|e| e[1] <= e[0]));
    }

    #[test]
    fn maximal_function_dominates_and_scales(c in 0.1..10.0f64, x0 in point()) {
        let g = square(17);
        let f = CellField::from_fn(&g, |x| (-(dist(x, x0) * 4.0).powi(2)).exp());
        let cfg = MaximalConfig::sweep(&g);
        let m = hl_maximal(&f, &g, &cfg);
        let mc = hl_maximal(&f.map(|v| c * v), &g, &cfg);
        for k in 0..g.node_count() {
            prop_assert!(m.nodal.values[k] >= 0.0);
            prop_assert!((mc.nodal.values[k] - c * m.nodal.values[k]).abs() <= 1e-12 * c * m.nodal.values[k].max(1.0));
        }
    }

    #[test]
    fn fractional_maximal_of_dirac_is_bracketed(a in point(), w in 0.1..3.0f64) {
        let g = square(33);
        let m = frac_maximal_1(MaximalInput::Measure(&MeasureData::dirac(a, w)), &g, &MaximalConfig::sweep(&g));
        for k in 0..g.node_count() {
            let d = dist(g.coords[k], a);
            if d > 0.0 {
                prop_assert!(m.nodal.values[k] <= w / (std::f64::consts::PI * d) * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn distribution_sandwich_holds(seed in any::<u64>(), m in 1.5..4.0f64, q in 0.5..2.0f64, lambda in 0.05..2.0f64) {
        let g = square(17);
        let f = CellField::from_fn(&g, |x| 1.0 + 5.0 * ((seed % 1000) as f64 * 0.01 + 7.0 * x[0] * x[1]).sin().abs());
        let rep = distribution_sum(&f, &g, lambda, m, q).unwrap();
        prop_assert!(rep.c_emp <= rep.c_bound * (1.0 + 1e-12));
    }

    #[test]
    fn window_matches_brute_force(c in point(), rho in 0.01..0.6f64) {
        let g = build_grid(DomainKind::LShape, 21).unwrap();
        let inside = |x: [f64; 2]| !(x[0] > 0.5 + 1e-12 && x[1] > 0.5 + 1e-12);
        if !inside(c) {
            return Ok(());
        }
        let brute = (0..g.node_count()).filter(|&k| inside(g.coords[k]) && dist(g.coords[k], c) < rho).count();
        match window(&g, c, rho) {
            Ok(w) => prop_assert_eq!(w.nodes.len(), brute),
            Err(_) => prop_assert_eq!(brute, 0),
        }
    }
}
