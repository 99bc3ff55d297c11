//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line
//! before asserting; run with `--nocapture` to see all of them.

use std::f64::consts::{PI, SQRT_2};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use obstacle_lab::chain::{build_window, comparison_metrics, solve_chain, ChainConfig};
use obstacle_lab::config::ExperimentConfig;
use obstacle_lab::exponent::{ExponentSpec, Flux};
use obstacle_lab::field::{grad_power_integral, GridFunction};
use obstacle_lab::geometry::dist;
use obstacle_lab::grid::{build_grid, DomainKind, Grid};
use obstacle_lab::harness::{
    approximation_study, energy_l1_estimate, level_set_decay, main_estimate_report, select_r0, DecayConfig,
    FunctionSpec, Instance, MaximalFields, Variant,
};
use obstacle_lab::maximal::{frac_maximal_1, phi_trunc, truncate, MaximalConfig, MaximalInput};
use obstacle_lab::measure::{l1_mass_check, Atom, MeasureData, MASS_TOL};
use obstacle_lab::solver::{solve_problem, ProblemSpec, SolveMode, SolverOptions};

fn verdict(n: u32, passed: bool, detail: &str) {
    println!("criterion {n}: {} {detail}", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "criterion {n}: {detail}");
}

fn interval(n: usize) -> Grid {
    build_grid(DomainKind::UnitInterval, n).unwrap()
}

fn square(n: usize) -> Grid {
    build_grid(DomainKind::UnitSquare, n).unwrap()
}

fn free(grid: Grid, p: f64) -> Instance {
    let dim = grid.dim;
    Instance::free(grid, Flux::p_laplacian(p, dim).unwrap())
}

fn green(x: f64) -> f64 {
    0.5 * x.min(1.0 - x)
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped_configs() -> Vec<(String, ExperimentConfig)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(configs_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, ExperimentConfig::load(&p).unwrap())
        })
        .collect()
}

#[test]
fn criterion_01_green_function() {
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for n in [33usize, 65, 129] {
        let start = Instant::now();
        let inst = free(interval(n), 2.0);
        let mu = MeasureData::dirac([0.5, 0.0], 1.0);
        let (u, rep) = inst.solve_with(&mu).unwrap();
        let elapsed = start.elapsed();
        let h = inst.grid.h;
        let err = (0..n)
            .map(|k| (u.values[k] - green(inst.grid.coords[k][0])).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err / h);
        if !rep.converged || err > h {
            failures.push(format!("N={n}: max error {err:e} > h"));
        }
        let l1 = grad_power_integral(&inst.grid, &u, None, |_| 1.0);
        if (l1 - 0.5).abs() > 2.0 * h {
            failures.push(format!("N={n}: int |Du| = {l1}"));
        }
        for q in [0.5, 1.0, 2.0] {
            let v = grad_power_integral(&inst.grid, &u, None, |_| q);
            if (v - 0.5f64.powf(q)).abs() > 5.0 * q * h {
                failures.push(format!("N={n}, q={q}: {v}"));
            }
        }
        if elapsed >= Duration::from_secs(1) {
            failures.push(format!("N={n}: {elapsed:?}"));
        }
    }
    verdict(1, failures.is_empty(), &format!("worst error/h {worst:.2e} {failures:?}"));
}

#[test]
fn criterion_02_obstacle_consistency() {
    let start = Instant::now();
    let grid = square(33);
    let flux = Flux::p_laplacian(2.0, 2).unwrap();
    let mu = MeasureData::dirac([0.5, 0.5], 1.0);
    let psi = GridFunction::from_fn(&grid, |x| 0.2 * x[0] * (1.0 - x[0]) * x[1] * (1.0 - x[1]));
    let mut pinned = ProblemSpec::new(&grid, &flux, &psi);
    pinned.mode = SolveMode::Double;
    pinned.lower = Some(&psi);
    pinned.upper = Some(&psi);
    pinned.measure = Some(&mu);
    let opts = SolverOptions::accelerated();
    let (u, rep) = solve_problem(&pinned, &opts).unwrap();
    let pinned_ok = u == psi && rep.sweeps <= 2;

    let zero = GridFunction::zeros(&grid);
    let lo = GridFunction::constant(&grid, -1e6);
    let hi = GridFunction::constant(&grid, 1e6);
    let mut boxed = ProblemSpec::new(&grid, &flux, &zero);
    boxed.mode = SolveMode::Double;
    boxed.lower = Some(&lo);
    boxed.upper = Some(&hi);
    boxed.measure = Some(&mu);
    let (ub, _) = solve_problem(&boxed, &opts).unwrap();
    let mut eq = ProblemSpec::new(&grid, &flux, &zero);
    eq.measure = Some(&mu);
    let (ue, _) = solve_problem(&eq, &opts).unwrap();
    let diff = ub.max_abs_diff_on(&ue, 0..grid.node_count());
    let elapsed = start.elapsed();
    let ok = pinned_ok && diff <= 10.0 * opts.tol && elapsed < Duration::from_secs(1);
    verdict(
        2,
        ok,
        &format!("pinned sweeps {}, inactive diff {diff:.2e}, {elapsed:?}", rep.sweeps),
    );
}

#[test]
fn criterion_03_truncations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    for _ in 0..10_000 {
        let k = rng.random_range(1e-3..10.0);
        let (s, t) = (rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
        let tk = truncate(t, k);
        if (tk - truncate(s, k)).abs() > (t - s).abs() {
            violations += 1;
        }
        if truncate(-t, k) != -tk || phi_trunc(-t, k) != -phi_trunc(t, k) {
            violations += 1;
        }
        if (phi_trunc(t, k) - phi_trunc(s, k)).abs() > (t - s).abs() {
            violations += 1;
        }
        // Band identity: Phi_k = T_{k+1} - T_k, vanishing on [-k, k].
        if (phi_trunc(t, k) - (truncate(t, k + 1.0) - tk)).abs() > 1e-15 * t.abs().max(1.0) {
            violations += 1;
        }
        if t.abs() <= k && (phi_trunc(t, k) != 0.0 || tk != t) {
            violations += 1;
        }
        if tk.abs() > k || phi_trunc(t, k).abs() > 1.0 {
            violations += 1;
        }
    }
    verdict(3, violations == 0, &format!("{violations} violations over 10^4 samples"));
}

#[test]
fn criterion_04_fractional_maximal() {
    let g1 = interval(129);
    let m1 = frac_maximal_1(
        MaximalInput::Measure(&MeasureData::dirac([0.5, 0.0], 1.0)),
        &g1,
        &MaximalConfig::sweep(&g1),
    );
    let one_d = m1.nodal.values.iter().all(|&v| v == 0.5);

    let start = Instant::now();
    let g2 = square(129);
    let c = [0.5, 0.5];
    let m2 = frac_maximal_1(MaximalInput::Measure(&MeasureData::dirac(c, 1.0)), &g2, &MaximalConfig::sweep(&g2));
    let elapsed = start.elapsed();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = 0;
    let mut probes = 0;
    while probes < 100 {
        let k = rng.random_range(0..g2.node_count());
        let d = dist(g2.coords[k], c);
        if d == 0.0 {
            continue;
        }
        probes += 1;
        let exact = 1.0 / (PI * d);
        let v = m2.nodal.values[k];
        if !(v <= exact * (1.0 + 1e-12) && v * SQRT_2 >= exact * (1.0 - 1e-12)) {
            bad += 1;
        }
    }
    let ok = one_d && bad == 0 && elapsed < Duration::from_secs(10);
    verdict(4, ok, &format!("1-D exact {one_d}, 2-D {bad}/100 outside, {elapsed:?}"));
}

#[test]
fn criterion_05_mollification_mass() {
    let g = square(65);
    let measures = [
        MeasureData::dirac([0.5, 0.5], 1.0),
        MeasureData {
            atoms: vec![Atom { x: [0.3, 0.6], w: 2.0 }, Atom { x: [0.7, 0.4], w: -0.5 }],
            density: None,
        },
        MeasureData::dirac([0.5, 0.05], 1.0),
        MeasureData::dirac([0.0, 0.3], 1.0),
    ];
    let mut failures = Vec::new();
    for (m, mu) in measures.iter().enumerate() {
        for rep in l1_mass_check(mu, &[4, 8, 16, 32], &g).unwrap() {
            let bounded = rep.l1_norm <= rep.total_variation + MASS_TOL;
            if !(bounded && rep.within_bound && rep.deficit_explained) {
                failures.push(format!("measure {m}, i {}: {} vs {}", rep.index, rep.l1_norm, rep.total_variation));
            }
        }
    }
    verdict(5, failures.is_empty(), &format!("{failures:?}"));
}

#[test]
fn criterion_06_energy_descent() {
    let mut failures = Vec::new();
    let mut count = 0;
    for (name, cfg) in shipped_configs() {
        let (inst, mu) = cfg.build().unwrap();
        let (_, rep) = inst.solve_with(&mu).unwrap();
        count += 1;
        if let Some(k) = rep.energies.windows(2).position(|w| w[1] > w[0]) {
            failures.push(format!("{name}: energy rises after sweep {k}"));
        }
    }
    verdict(6, count > 0 && failures.is_empty(), &format!("{count} shipped instances {failures:?}"));
}

#[test]
fn criterion_07_approximation_cauchy() {
    let start = Instant::now();
    let inst = free(square(65), 2.0);
    let mu = MeasureData::dirac([0.5, 0.5], 1.0);
    let rep = approximation_study(&inst, &mu, &[4, 8, 16, 32], &[ExponentSpec::Constant { value: 1.5 }]).unwrap();
    let m = rep.consecutive(0);
    let elapsed = start.elapsed();
    let ok = m.len() == 3 && m.windows(2).all(|w| w[1] < w[0]) && elapsed < Duration::from_secs(120);
    verdict(7, ok, &format!("modulars {m:?}, {elapsed:?}"));
}

#[test]
fn criterion_08_chain_boundedness() {
    let start = Instant::now();
    let cfg = ChainConfig::default();
    // Outer windows of radius 0.2, 0.1, 0.05 around the flat-edge center.
    let radii = [0.025, 0.0125, 0.00625];
    let inst = free(square(129), 2.0);
    let mu = MeasureData::dirac([0.5, 0.03125], 1.0);
    let (u, _) = inst.solve_with(&mu).unwrap();
    let mut cols = [[0.0; 3]; 3];
    for (j, &r) in radii.iter().enumerate() {
        let win = build_window(&inst, &u, &mu, [0.5, 0.0], r, &cfg).unwrap();
        let ch = solve_chain(&inst, &u, &win).unwrap();
        let rows = comparison_metrics(&inst, &u, &win, &ch, &cfg);
        for (i, stage) in ["u_z", "z_h", "h_w"].iter().enumerate() {
            cols[i][j] = rows.iter().find(|row| row.stage == *stage).unwrap().ratio;
        }
    }
    let bounded = cols.iter().all(|c| {
        let mut s = *c;
        s.sort_by(f64::total_cmp);
        c.iter().all(|&x| x.is_finite() && x <= 3.0 * s[1])
    });

    let collapsed = Instance::new(
        square(129),
        Flux::p_laplacian(2.0, 2).unwrap(),
        FunctionSpec::Constant { value: -1e6 },
        FunctionSpec::Constant { value: 1e6 },
        FunctionSpec::Constant { value: 0.0 },
    );
    let zero = MeasureData::zero();
    let (u0, _) = collapsed.solve_with(&zero).unwrap();
    let mut worst = 0.0f64;
    for &r in &radii {
        let win = build_window(&collapsed, &u0, &zero, [0.5, 0.0], r, &cfg).unwrap();
        let ch = solve_chain(&collapsed, &u0, &win).unwrap();
        for row in comparison_metrics(&collapsed, &u0, &win, &ch, &cfg) {
            if ["u_z", "z_h", "h_w", "w_v"].contains(&row.stage) {
                worst = worst.max(row.lhs);
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = bounded && worst <= 10.0 * collapsed.options.tol && elapsed < Duration::from_secs(300);
    verdict(
        8,
        ok,
        &format!("ratios u->z {:?} z->h {:?} h->w {:?}, collapsed LHS {worst:.2e}, {elapsed:?}", cols[0], cols[1], cols[2]),
    );
}

#[test]
fn criterion_09_frozen_identity() {
    let inst = Instance::new(
        square(65),
        Flux::p_laplacian(2.5, 2).unwrap(),
        FunctionSpec::Constant { value: -1e6 },
        FunctionSpec::Constant { value: 1e6 },
        FunctionSpec::Affine {
            value: 0.0,
            slope: [1.0, 0.5],
        },
    );
    let mu = MeasureData::dirac([0.5, 0.0625], 1.0);
    let (u, _) = inst.solve_with(&mu).unwrap();
    let win = build_window(&inst, &u, &mu, [0.5, 0.0], 0.05, &ChainConfig::default()).unwrap();
    let ch = solve_chain(&inst, &u, &win).unwrap();
    let v = ch.v.as_ref().expect("frozen stage ran");
    let nodes = inst.grid.nodes_in_ball(win.center, 3.0 * win.r);
    let diff = v.max_abs_diff_on(&ch.w, nodes);
    verdict(9, diff <= 10.0 * inst.options.tol, &format!("max |v - w| on the 3r window {diff:.2e}"));
}

fn decay_for(inst: &Instance, mu: &MeasureData, r0: Option<f64>, epsilon: f64, q: f64) -> obstacle_lab::harness::DecayReport {
    let (u, _) = inst.solve_with(mu).unwrap();
    let fields = MaximalFields::compute(inst, &u, mu, &MaximalConfig::sweep(&inst.grid));
    let r0 = match r0 {
        Some(r) => r,
        None => select_r0(inst, &u, mu, 0.5, 0.1, None).unwrap().r0,
    };
    let cfg = DecayConfig {
        epsilon,
        n_level: 2.0,
        delta: 0.1,
        q,
        r0,
    };
    level_set_decay(inst, &u, &fields, &cfg).unwrap()
}

#[test]
fn criterion_10_level_sets() {
    let mut failures = Vec::new();
    let mut instances: Vec<(String, Instance, MeasureData)> = vec![
        ("green_1d".into(), free(interval(65), 2.0), MeasureData::dirac([0.5, 0.0], 1.0)),
        ("zero".into(), free(square(33), 2.0), MeasureData::zero()),
    ];
    for (name, cfg) in shipped_configs() {
        let (inst, mu) = cfg.build().unwrap();
        instances.push((name, inst, mu));
    }
    for (name, inst, mu) in &instances {
        for q in [0.5, 1.0, 1.5] {
            let rep = decay_for(inst, mu, None, 0.5, q);
            if !rep.nested || !rep.sandwich_ok {
                failures.push(format!("{name} q={q}: nested {} sandwich {}", rep.nested, rep.sandwich_ok));
            }
        }
    }
    // The 2-D Dirac instance with a radius large enough to populate the level sets.
    let inst = free(square(129), 2.0);
    let mu = MeasureData::dirac([0.5, 0.5], 1.0);
    let rep = decay_for(&inst, &mu, Some(0.45), 0.9, 1.0);
    let terms: Vec<f64> = rep.rows.iter().map(|r| r.term).collect();
    let ratio = rep.terminal_ratio;
    if !(rep.nested && rep.sandwich_ok && ratio.is_some_and(|r| r < 1.0)) {
        failures.push(format!("dirac_2d: terms {terms:?} ratio {ratio:?}"));
    }
    verdict(10, failures.is_empty(), &format!("terminal ratio {ratio:?} {failures:?}"));
}

#[test]
fn criterion_11_estimate_stability() {
    let start = Instant::now();
    let mut per_n = Vec::new();
    let mut shared_gap = 0.0f64;
    for n in [33usize, 65, 129] {
        let inst = free(square(n), 2.0);
        let mu = MeasureData::dirac([0.5, 0.5], 1.0);
        let (u, _) = inst.solve_with(&mu).unwrap();
        let fields = MaximalFields::compute(&inst, &u, &mu, &MaximalConfig::sweep(&inst.grid));
        let mut ratios = Vec::new();
        for q in [0.5, 1.0, 1.5] {
            let g = main_estimate_report(&inst, &u, &mu, &fields, q, 0.25, Variant::General).unwrap();
            let c = main_estimate_report(&inst, &u, &mu, &fields, q, 0.25, Variant::ConstantP).unwrap();
            for (a, b) in [(g.lhs, c.lhs), (g.m_mu, c.m_mu), (g.m_psi1, c.m_psi1), (g.m_psi2, c.m_psi2)] {
                let scale = a.abs().max(b.abs());
                if scale > 0.0 {
                    shared_gap = shared_gap.max((a - b).abs() / scale);
                }
            }
            ratios.push([g.ratio, c.ratio]);
        }
        per_n.push(ratios);
    }
    let mut spread = 0.0f64;
    let mut finite = true;
    for qi in 0..3 {
        for v in 0..2 {
            let r: Vec<f64> = per_n.iter().map(|x| x[qi][v]).collect();
            finite &= r.iter().all(|x| x.is_finite() && *x > 0.0);
            let mean = r.iter().sum::<f64>() / 3.0;
            spread = spread.max(r.iter().map(|x| (x - mean).abs() / mean).fold(0.0, f64::max));
        }
    }
    let elapsed = start.elapsed();
    let ok = finite && spread < 0.2 && shared_gap <= 1e-12 && elapsed < Duration::from_secs(600);
    verdict(
        11,
        ok,
        &format!("max spread {spread:.4}, shared-term gap {shared_gap:.1e}, {elapsed:?}"),
    );
}

#[test]
fn criterion_12_alpha_blowup() {
    let inst = free(interval(65), 2.0);
    let mu = MeasureData::dirac([0.5, 0.0], 1.0);
    let (u, _) = inst.solve_with(&mu).unwrap();
    let mut rhs = Vec::new();
    let mut base = 0.0;
    for alpha in [0.4, 0.2, 0.1, 0.05] {
        let e = energy_l1_estimate(&inst, &u, &mu, alpha).unwrap();
        base = e.base;
        rhs.push(e.rhs);
    }
    if base <= 1.0 {
        verdict(12, true, &format!("base {base} <= 1, monotonicity not asserted"));
        return;
    }
    let increasing = rhs.windows(2).all(|w| w[1] > w[0]);
    verdict(12, increasing, &format!("base {base}, RHS for alpha 0.4, 0.2, 0.1, 0.05: {rhs:?}"));
}

#[test]
fn criterion_13_determinism() {
    let bin = env!("CARGO_BIN_EXE_obstacle-lab");
    let config = configs_dir().join("default.toml");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let status = Command::new(bin)
            .args(["verify", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(d.path())
            .arg("--seed")
            .arg("11")
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    }
    let mut names: Vec<String> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let csv: Vec<&String> = names.iter().filter(|n| n.ends_with(".csv")).collect();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(dirs[0].path().join(n)).unwrap() != std::fs::read(dirs[1].path().join(n)).ok().unwrap_or_default())
        .collect();
    verdict(
        13,
        !csv.is_empty() && differing.is_empty(),
        &format!("{} CSV files compared, differing {differing:?}", csv.len()),
    );
}
