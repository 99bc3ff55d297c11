//! Subcommand orchestration. Every command computes its artifacts fully in
//! memory; the caller writes them only when the command succeeded.

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::chain::{build_window, comparison_metrics, higher_integrability_check, solve_chain, ChainConfig};
use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::exponent::{verify_structure, ExponentSpec, WeightSpec};
use crate::field::{grad_power_integral, GridFunction};
use crate::grid::NodeFlag;
use crate::harness::{
    approximation_study, energy_l1_estimate, level_set_decay, main_estimate_report, select_r0, DecayConfig,
    EstimateReport, FunctionSpec, Instance, MaximalFields,
};
use crate::maximal::MaximalConfig;
use crate::measure::{l1_mass_check, MeasureData};
use crate::report::{Artifacts, Csv};
use crate::row;
use crate::solver::SolveReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Solve,
    Chain,
    Verify,
    Sweep,
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Chain => "chain",
            Command::Verify => "verify",
            Command::Sweep => "sweep",
            Command::Selftest => "selftest",
        }
    }
}

pub fn execute(cmd: Command, cfg: &ExperimentConfig) -> Result<Artifacts> {
    match cmd {
        Command::Solve => solve_command(cfg),
        Command::Chain => chain_command(cfg),
        Command::Verify => verify_command(cfg),
        Command::Sweep => sweep_command(cfg),
        Command::Selftest => selftest_command(cfg),
    }
}

fn summary_json(v: Value) -> String {
    let mut s = serde_json::to_string_pretty(&v).expect("summary serializes");
    s.push('\n');
    s
}

fn header(cmd: Command, cfg: &ExperimentConfig, inst: &Instance) -> Value {
    json!({
        "command": cmd.name(),
        "seed": cfg.seed,
        "domain": inst.grid.kind.name(),
        "resolution": inst.grid.resolution,
        "h": inst.grid.h,
        "p_minus": inst.flux.exponent.p_minus,
        "p_plus": inst.flux.exponent.p_plus,
        "lambda1": inst.flux.lambda1,
        "lambda2": inst.flux.lambda2,
    })
}

/// Solves and insists on convergence and an exactly non-increasing energy
/// trace.
pub fn solve_checked(inst: &Instance, mu: &MeasureData) -> Result<(GridFunction, SolveReport)> {
    let (u, rep) = inst.solve_with(mu)?;
    check_report("solve", &rep)?;
    Ok((u, rep))
}

fn check_report(stage: &str, rep: &SolveReport) -> Result<()> {
    if !rep.converged {
        return Err(LabError::NotConverged {
            sweeps: rep.sweeps,
            update: rep.final_update,
        });
    }
    if let Some(i) = rep.energies.windows(2).position(|w| w[1] > w[0]) {
        return Err(LabError::Invariant(format!(
            "{stage}: energy increased at sweep {} ({} -> {})",
            i + 1,
            rep.energies[i],
            rep.energies[i + 1]
        )));
    }
    Ok(())
}

fn solve_json(rep: &SolveReport) -> Value {
    json!({
        "sweeps": rep.sweeps,
        "converged": rep.converged,
        "final_update": rep.final_update,
        "energy": rep.energy,
        "residual": rep.residual,
        "active_lower": rep.active_lower,
        "active_upper": rep.active_upper,
        "relaxation": rep.omega,
    })
}

/// Closed-form solution for the one-dimensional case `p = 2`, constant
/// weight, constant boundary value and a purely atomic measure with inactive
/// obstacles: `u = g + sum_a (w_a / gamma) G(x, a)` with the Green's function
/// `G(x, a) = x (1 - a)` for `x <= a`, `a (1 - x)` otherwise.
pub fn green_oracle(inst: &Instance, mu: &MeasureData, rep: &SolveReport) -> Option<GridFunction> {
    let grid = &inst.grid;
    if grid.dim != 1 || mu.density.is_some() || rep.active_lower + rep.active_upper > 0 {
        return None;
    }
    let ExponentSpec::Constant { value: p } = inst.flux.exponent.spec else {
        return None;
    };
    let WeightSpec::Constant { value: gamma } = inst.flux.weight.spec else {
        return None;
    };
    let FunctionSpec::Constant { value: g } = inst.g else {
        return None;
    };
    if p != 2.0 {
        return None;
    }
    Some(GridFunction::from_fn(grid, |x| {
        g + mu
            .atoms
            .iter()
            .map(|a| {
                let s = a.x[0];
                let green = if x[0] <= s { x[0] * (1.0 - s) } else { s * (1.0 - x[0]) };
                a.w / gamma * green
            })
            .sum::<f64>()
    }))
}

fn solve_command(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let (inst, mu) = cfg.build()?;
    let (u, rep) = solve_checked(&inst, &mu)?;
    let grid = &inst.grid;
    let exact = green_oracle(&inst, &mu, &rep);
    let mut csv = Csv::new(&["node", "x", "y", "u", "exact", "error"]);
    let mut max_err: Option<f64> = None;
    for k in 0..grid.node_count() {
        if grid.flags[k] == NodeFlag::Exterior {
            continue;
        }
        let x = grid.coords[k];
        let (e, err) = match &exact {
            Some(ex) => {
                let err = (u.values[k] - ex.values[k]).abs();
                max_err = Some(max_err.map_or(err, |m: f64| m.max(err)));
                (Some(ex.values[k]), Some(err))
            }
            None => (None, None),
        };
        csv.push(row![k, x[0], x[1], u.values[k], e, err]);
    }
    let mut energy = Csv::new(&["sweep", "energy"]);
    for (i, e) in rep.energies.iter().enumerate() {
        energy.push(row![i, *e]);
    }
    let mut summary = header(Command::Solve, cfg, &inst);
    summary["solve"] = solve_json(&rep);
    summary["mass"] = json!(mu.total_mass(grid));
    summary["grad_l1"] = json!(grad_power_integral(grid, &u, None, |_| 1.0));
    summary["max_error"] = json!(max_err);
    let mut out = Artifacts::default();
    out.add("solution.csv", csv.finish());
    out.add("energy.csv", energy.finish());
    out.add("summary.json", summary_json(summary));
    Ok(out)
}

fn chain_config(cfg: &ExperimentConfig) -> ChainConfig {
    ChainConfig {
        tau0: cfg.harness.tau0,
        sigma: cfg.chain.sigma,
        beta: cfg.chain.beta,
        delta: cfg.harness.delta,
        big_r: cfg.harness.big_r,
        r0: cfg.harness.r0,
    }
}

fn chain_command(cfg: &ExperimentConfig) -> Result<Artifacts> {
    if cfg.chain.centers.is_empty() || cfg.chain.radii.is_empty() {
        return Err(LabError::Config("[chain] needs at least one center and one radius".into()));
    }
    let (inst, mu) = cfg.build()?;
    let (u, rep) = solve_checked(&inst, &mu)?;
    let ccfg = chain_config(cfg);
    let mut table = Csv::new(&["center_x", "center_y", "stage", "r", "lhs", "rhs", "ratio", "flag"]);
    let mut windows = Csv::new(&[
        "center_x",
        "center_y",
        "r",
        "p0",
        "p1",
        "p2",
        "kappa",
        "psi1_mass",
        "psi2_mass",
        "area",
        "r0",
        "scaling",
        "radius_ok",
        "hi1_ok",
        "bc_ok",
        "oscillation_ok",
        "geometric",
        "boundary_consistent",
        "z_above_upper",
        "frozen_skipped",
    ]);
    for &center in &cfg.chain.centers {
        for &r in &cfg.chain.radii {
            let win = build_window(&inst, &u, &mu, center, r, &ccfg)?;
            let ch = solve_chain(&inst, &u, &win)?;
            for (stage, rep) in &ch.reports {
                check_report(stage, rep)?;
            }
            let c = win.center;
            for row in comparison_metrics(&inst, &u, &win, &ch, &ccfg) {
                table.push(row![c[0], c[1], row.stage, row.r, row.lhs, row.rhs, row.ratio, row.flag]);
            }
            let hi = higher_integrability_check(
                &inst,
                &ch.w,
                &win,
                ccfg.sigma,
                ccfg.beta,
                ccfg.tau0,
                cfg.chain.rho_factor * r,
            )?;
            table.push(row![c[0], c[1], "reverse_holder", r, hi.lhs, hi.rhs, hi.ratio, "observation"]);
            table.push(row![c[0], c[1], "w_moment", r, hi.moment_lhs, hi.moment_rhs, hi.moment_ratio, "observation"]);
            windows.push(row![
                c[0],
                c[1],
                r,
                win.p0,
                win.p1,
                win.p2,
                win.kappa,
                win.psi1_mass,
                win.psi2_mass,
                win.area,
                win.r0.r0,
                win.scaling,
                win.radius_ok,
                win.hi1_ok,
                win.bc_ok,
                win.oscillation_ok,
                win.geometric,
                ch.boundary_consistent,
                ch.z_above_upper,
                ch.frozen_skipped.clone().unwrap_or_default()
            ]);
        }
    }
    let mut summary = header(Command::Chain, cfg, &inst);
    summary["solve"] = solve_json(&rep);
    let mut out = Artifacts::default();
    out.add("chain_table.csv", table.finish());
    out.add("windows.csv", windows.finish());
    out.add("summary.json", summary_json(summary));
    Ok(out)
}

const ESTIMATE_COLUMNS: [&str; 13] = [
    "variant",
    "q",
    "alpha",
    "lhs",
    "potential",
    "potential_term",
    "m_mu",
    "m_psi1",
    "m_psi2",
    "g_term",
    "constant",
    "rhs",
    "ratio",
];

fn estimate_row(e: &EstimateReport) -> Vec<crate::report::Field> {
    row![
        e.variant.name(),
        e.q,
        e.alpha,
        e.lhs,
        e.potential,
        e.potential_term,
        e.m_mu,
        e.m_psi1,
        e.m_psi2,
        e.g_term,
        e.constant,
        e.rhs,
        e.ratio
    ]
}

fn estimates(
    cfg: &ExperimentConfig,
    inst: &Instance,
    u: &GridFunction,
    mu: &MeasureData,
    fields: &MaximalFields,
) -> Result<Vec<EstimateReport>> {
    let mut out = Vec::new();
    for &variant in cfg.harness.variants.iter().filter(|v| v.applies(inst)) {
        for &q in &cfg.harness.q {
            for &alpha in &cfg.harness.alpha {
                out.push(main_estimate_report(inst, u, mu, fields, q, alpha, variant)?);
            }
        }
    }
    Ok(out)
}

fn verify_command(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let h = &cfg.harness;
    let (inst, mu) = cfg.build()?;
    let grid = &inst.grid;
    let structure = verify_structure(&inst.flux, grid, 2000, cfg.seed)?;
    if !structure.violations.is_empty() {
        return Err(LabError::Invariant(format!("structure conditions: {}", structure.violations.join("; "))));
    }
    let (u, rep) = solve_checked(&inst, &mu)?;
    let fields = MaximalFields::compute(&inst, &u, &mu, &MaximalConfig::sweep(grid));
    let mut out = Artifacts::default();

    let mut est = Csv::new(&ESTIMATE_COLUMNS);
    for e in estimates(cfg, &inst, &u, &mu, &fields)? {
        est.push(estimate_row(&e));
    }

    let r0 = select_r0(&inst, &u, &mu, h.big_r, h.tau0, h.r0)?;
    let mut decay = Csv::new(&["q", "k", "c_measure", "d_measure", "covering_bound", "covering_ok", "term"]);
    let mut decay_json = Vec::new();
    for &q in &h.q {
        let dc = DecayConfig {
            epsilon: h.epsilon,
            n_level: h.level_ratio,
            delta: h.delta,
            q,
            r0: r0.r0,
        };
        let rep = level_set_decay(&inst, &u, &fields, &dc)?;
        if !rep.nested {
            return Err(LabError::Invariant(format!("level sets not nested for q = {q}")));
        }
        for r in &rep.rows {
            decay.push(row![q, r.k, r.c_measure, r.d_measure, r.covering_bound, r.covering_ok, r.term]);
        }
        decay_json.push(json!({
            "q": q,
            "lambda0": rep.lambda0,
            "s": rep.s,
            "k_max": rep.k_max,
            "capped": rep.capped,
            "nested": rep.nested,
            "terminal_ratio": rep.terminal_ratio,
            "sandwich_c_emp": rep.sandwich.c_emp,
            "sandwich_c_bound": rep.sandwich.c_bound,
            "sandwich_ok": rep.sandwich_ok,
        }));
    }

    let mut l1 = Csv::new(&["alpha", "lhs", "linear", "base", "exponent", "rhs", "ratio"]);
    for &alpha in &h.alpha {
        let e = energy_l1_estimate(&inst, &u, &mu, alpha)?;
        l1.push(row![e.alpha, e.lhs, e.linear, e.base, e.exponent, e.rhs, e.ratio]);
    }

    out.add("estimate_report.csv", est.finish());
    out.add("decay_table.csv", decay.finish());
    out.add("energy_l1.csv", l1.finish());

    if !h.mollify.is_empty() {
        let mut mass = Csv::new(&["index", "l1_norm", "total_variation", "within_bound", "deficit_explained"]);
        for m in l1_mass_check(&mu, &h.mollify, grid)? {
            if !(m.within_bound && m.deficit_explained) {
                return Err(LabError::Invariant(format!("mollified mass bound fails at index {}", m.index)));
            }
            mass.push(row![m.index, m.l1_norm, m.total_variation, m.within_bound, m.deficit_explained]);
        }
        out.add("mass_table.csv", mass.finish());
        if !h.test_exponents.is_empty() && !mu.is_zero() {
            let study = approximation_study(&inst, &mu, &h.mollify, &h.test_exponents)?;
            for m in &study.members {
                check_report("approximation", &m.report)?;
            }
            let mut cauchy = Csv::new(&["i", "j", "r_id", "modular", "consecutive", "out_of_theory"]);
            for r in &study.rows {
                cauchy.push(row![r.i, r.j, r.r_id, r.modular, r.consecutive, r.out_of_theory]);
            }
            out.add("cauchy_table.csv", cauchy.finish());
        }
    }

    let mut summary = header(Command::Verify, cfg, &inst);
    summary["solve"] = solve_json(&rep);
    summary["structure"] = json!({
        "samples": structure.samples,
        "lambda1_emp": structure.lambda1_emp,
        "lambda2_emp": structure.lambda2_emp,
        "lambda_tilde_emp": structure.lambda_tilde_emp,
        "jacobian_gap": structure.jacobian_gap,
    });
    summary["r0"] = json!({
        "r0": r0.r0,
        "derived": r0.derived,
        "overridden": r0.overridden,
        "m": r0.m,
        "m1": r0.m1,
        "q": r0.q,
        "caps": r0.caps,
        "omega_cap": r0.omega_cap,
    });
    summary["decay"] = Value::Array(decay_json);
    summary["atom_nodes"] = json!(fields.atom_nodes());
    summary["skipped_variants"] = json!(h
        .variants
        .iter()
        .filter(|v| !v.applies(&inst))
        .map(|v| v.name())
        .collect::<Vec<_>>());
    out.add("summary.json", summary_json(summary));
    Ok(out)
}

fn sweep_command(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let resolutions = if cfg.sweep.resolutions.is_empty() {
        vec![cfg.domain.resolution]
    } else {
        cfg.sweep.resolutions.clone()
    };
    let runs: Vec<(usize, f64, Vec<EstimateReport>, SolveReport)> = resolutions
        .par_iter()
        .map(|&n| {
            let (inst, mu) = cfg.build_at(n)?;
            let (u, rep) = solve_checked(&inst, &mu)?;
            let fields = MaximalFields::compute(&inst, &u, &mu, &MaximalConfig::sweep(&inst.grid));
            Ok((n, inst.grid.h, estimates(cfg, &inst, &u, &mu, &fields)?, rep))
        })
        .collect::<Result<_>>()?;
    let mut cols = vec!["resolution", "h"];
    cols.extend(ESTIMATE_COLUMNS);
    let mut table = Csv::new(&cols);
    let mut solves = Vec::new();
    for (n, h, reps, rep) in &runs {
        for e in reps {
            let mut r = row![*n, *h];
            r.extend(estimate_row(e));
            table.push(r);
        }
        solves.push(json!({"resolution": n, "solve": solve_json(rep)}));
    }
    let summary = json!({
        "command": "sweep",
        "seed": cfg.seed,
        "domain": cfg.domain.kind,
        "resolutions": resolutions,
        "runs": solves,
    });
    let mut out = Artifacts::default();
    out.add("sweep_table.csv", table.finish());
    out.add("summary.json", summary_json(summary));
    Ok(out)
}

fn selftest_command(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let results = crate::selftest::run_all(cfg.seed);
    let mut csv = Csv::new(&["check", "status", "detail"]);
    for r in &results {
        csv.push(row![r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail.clone()]);
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} ({})", r.name, r.detail))
        .collect();
    if !failed.is_empty() {
        return Err(LabError::Invariant(format!(
            "{} selftest check(s) failed: {}",
            failed.len(),
            failed.join("; ")
        )));
    }
    let mut out = Artifacts::default();
    out.add("selftest.csv", csv.finish());
    out.add(
        "summary.json",
        summary_json(json!({"command": "selftest", "seed": cfg.seed, "checks": results.len(), "failed": 0})),
    );
    Ok(out)
}
