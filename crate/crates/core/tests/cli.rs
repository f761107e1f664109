use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use twoscale::harness::{ExperimentConfig, REPORT_FILES};

fn twoscale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twoscale"))
        .args(args)
        .env("TWOSCALE_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_subcommand_flag() {
    for (sub, flags) in [
        ("lockin", &["--config", "--out", "--trials", "--eps1", "--r1in", "--workers"][..]),
        ("rate", &["--config", "--out", "--n0", "--kappa"][..]),
        ("bounds", &["--spec", "--eps", "--n0", "--m1", "--m2", "--format", "--sweep", "--grid"][..]),
        ("gtd", &["--variant", "--states", "--dim", "--gamma", "--seed"][..]),
        ("simulate", &["--config", "--trial", "--mode"][..]),
    ] {
        let o = twoscale(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0));
        let text = String::from_utf8_lossy(&o.stdout);
        for f in flags {
            assert!(text.contains(f), "{sub} --help lacks {f}");
        }
    }
}

#[test]
fn missing_spec_file_is_a_config_error() {
    let o = twoscale(&[
        "bounds", "--spec", "/nonexistent/spec.json", "--eps", "0.1", "--n0", "10", "--r1in", "1", "--r2in", "1",
        "--r2out", "2", "--m1", "1", "--m2", "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/spec.json"));
}

#[test]
fn zero_epsilon_is_a_config_error() {
    let o = twoscale(&["bounds", "--config", &config("lockin_scalar.json"), "--eps", "0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut value: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(config("lockin_scalar.json")).unwrap()).unwrap();
    value["surprise"] = serde_json::json!(1);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, value.to_string()).unwrap();
    let out = dir.path().join("out");
    let o = twoscale(&["lockin", "--config", path_str(&path), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists(), "nothing is written on failure");
}

#[test]
fn initial_point_outside_radii_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = twoscale(&["lockin", "--config", &config("lockin_scalar.json"), "--r1in", "0.5", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn bounds_formats_and_sweeps() {
    let cfg = config("lockin_scalar.json");
    let o = twoscale(&["bounds", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report.is_object());

    let o = twoscale(&["bounds", "--config", &cfg, "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = String::from_utf8_lossy(&o.stdout);
    assert!(csv.starts_with("name,value,column,formula"));
    assert!(csv.contains("R1_out"));

    let o = twoscale(&["bounds", "--config", &cfg, "--format", "table"]);
    assert_eq!(o.status.code(), Some(0));

    let o = twoscale(&["bounds", "--config", &cfg, "--sweep", "n0", "--grid", "20000,40000,80000"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<_> = String::from_utf8_lossy(&o.stdout).lines().filter(|l| !l.is_empty()).map(str::to_owned).collect();
    assert_eq!(lines.len(), 4, "{lines:?}");
}

#[test]
fn gtd_instance_feeds_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gtd");
    let o = twoscale(&["gtd", "--variant", "tdc", "--states", "6", "--dim", "2", "--seed", "4", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["spec.json", "mdp.json", "gtd.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let spec = out.join("spec.json");
    let o = twoscale(&[
        "bounds", "--spec", path_str(&spec), "--eps", "0.05", "--n0", "1000", "--r1in", "1", "--r2in", "1", "--r2out",
        "2", "--m1", "3", "--m2", "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn lockin_writes_reproducible_report() {
    let dir = tempfile::tempdir().unwrap();
    let small = ["--trials", "6", "--horizon", "60000", "--n1", "40000"];
    let first = dir.path().join("first");
    let cfg = config("lockin_scalar.json");
    let mut args = vec!["lockin", "--config", &cfg];
    args.extend_from_slice(&small);
    args.extend_from_slice(&["--out", path_str(&first)]);
    let o = twoscale(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in REPORT_FILES {
        assert!(first.join(f).is_file(), "{f} missing");
    }
    let manifest = first.join("manifest.json");
    let reloaded = ExperimentConfig::load(&manifest).unwrap();
    assert_eq!(reloaded.trials, 6);
    assert_eq!(reloaded.n1, Some(40000));

    let second = dir.path().join("second");
    let o = twoscale(&["lockin", "--config", path_str(&manifest), "--out", path_str(&second)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(first.join("curves.csv")).unwrap(),
        std::fs::read(second.join("curves.csv")).unwrap()
    );
}

#[test]
fn out_dir_with_missing_parent_is_rejected() {
    let o = twoscale(&["rate", "--config", &config("rate_gtd0.json"), "--out", "/nonexistent/parent/out"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = twoscale(&["simulate", "--config", &config("rate_gtd0.json"), "--mode", "projected", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n,err_theta,err_z,projected_theta,projected_w"));
    assert!(lines.count() > 100);
}
