use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_obstacle-lab")
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(bin())
        .arg(sub)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

const SQUARE_P3: &str = r#"
[domain]
kind = "unit_square"
resolution = 17

[exponent]
kind = "constant"
value = 3.0

[measure]
atoms = [{ x = [0.5, 0.5], w = 1.0 }]
"#;

#[test]
fn selftest_passes_on_default_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run("selftest", &configs_dir().join("default.toml"), &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("selftest.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(1) == Some("PASS")));
}

#[test]
fn solve_green_config_is_accurate_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs_dir().join("dirac_1d.toml");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = run("solve", &cfg, d, &[]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["solution.csv", "energy.csv", "summary.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    let csv = std::fs::read_to_string(a.join("solution.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("node,x,y,u,exact,error"));
    let h = 1.0 / 128.0;
    for line in lines {
        let err: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(err <= h, "{line}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SQUARE_P3);
    let out = tmp.path().join("out");
    let o = run("solve", &cfg, &out, &["--seed", "42"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 42);
}

#[test]
fn malformed_config_exits_2_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    for text in [
        "[domain]\nkind = \"unit_square\"\nresolution = \"many\"\n",
        "[domain]\nkind = \"torus\"\nresolution = 17\n[exponent]\nkind = \"constant\"\nvalue = 2.0\n",
        &format!("{SQUARE_P3}\n[solver]\ntolerance = 1e-9\n"),
        &SQUARE_P3.replace("value = 3.0", "value = 0.5"),
    ] {
        let cfg = write_config(tmp.path(), text);
        let out = tmp.path().join("out");
        let o = run("solve", &cfg, &out, &[]);
        assert_eq!(o.status.code(), Some(2), "{text}\n{}", String::from_utf8_lossy(&o.stderr));
        assert!(!out.exists());
    }
}

#[test]
fn missing_config_file_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = run("solve", &tmp.path().join("absent.toml"), &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn non_convergence_exits_3_without_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SQUARE_P3}\n[solver]\nmax_sweeps = 2\n"));
    let out = tmp.path().join("out");
    let o = run("solve", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("did not converge"));
    assert!(!out.exists());
}

#[test]
fn structure_violation_exits_4_without_artifacts() {
    // Declared growth constant below the true one for p = 3.
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SQUARE_P3}\n[flux]\nlambda1 = 1.5\nlambda2 = 1.0\n"));
    let out = tmp.path().join("out");
    let o = run("verify", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.exists());
}

#[test]
fn every_subcommand_runs_on_a_small_config() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!(
        "{}\n[chain]\ncenters = [[0.5, 0.0]]\nradii = [0.05]\n[sweep]\nresolutions = [9, 17]\n[harness]\nmollify = [2, 4]\n",
        SQUARE_P3.replace("resolution = 17", "resolution = 33")
    );
    let cfg = write_config(tmp.path(), &text);
    for (sub, files) in [
        ("solve", &["solution.csv", "energy.csv", "summary.json"][..]),
        ("chain", &["chain_table.csv", "windows.csv", "summary.json"][..]),
        ("verify", &["estimate_report.csv", "decay_table.csv", "energy_l1.csv", "mass_table.csv", "summary.json"][..]),
        ("sweep", &["sweep_table.csv", "summary.json"][..]),
    ] {
        let out = tmp.path().join(sub);
        let o = run(sub, &cfg, &out, &["--threads", "1"]);
        assert_eq!(o.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
        for f in files {
            assert!(out.join(f).is_file(), "{sub}: missing {f}");
        }
    }
}
