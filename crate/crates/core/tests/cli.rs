use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latent-extremes"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_succeeds_and_bad_arguments_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run(dir.path(), &["fit", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["simulate", "--random-sites", "3", "--years", "5", "--out", "x.csv"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["extract", "absent.csv", "--out", "m.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_extract_fit_small_world() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--random-sites", "4,2", "--years", "8", "--seed", "3", "--daily", "--out", "daily.csv"]);
    ok(d, &["extract", "daily.csv", "--out", "maxima.csv", "--report", "report.csv"]);
    let maxima = std::fs::read_to_string(d.join("maxima.csv")).unwrap();
    assert!(maxima.starts_with("# latent-extremes"));
    assert_eq!(maxima.lines().filter(|l| !l.starts_with('#')).count(), 1 + 6 * 8);
    ok(
        d,
        &[
            "fit", "--field", "maxima.csv", "--iterations", "3", "--burn-in", "200", "--seed", "3", "--out", "fit.json", "--table", "table.txt",
        ],
    );
    let table = std::fs::read_to_string(d.join("table.txt")).unwrap();
    assert!(table.contains("psi_F0") && table.contains("mu_M0") && table.contains("N/A"));
    ok(d, &["diagnose", "--fit", "fit.json", "--kind", "qq", "--n-g", "200", "--out", "qq.csv"]);
    let qq = std::fs::read_to_string(d.join("qq.csv")).unwrap();
    assert_eq!(qq.lines().filter(|l| !l.starts_with('#')).count(), 1 + 6 * 8);
}

#[test]
fn simulate_is_deterministic_under_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(d, &["simulate", "--random-sites", "5,3", "--years", "20", "--seed", "11", "--out", "m.csv"]);
    }
    let x = std::fs::read(a.path().join("m.csv")).unwrap();
    let y = std::fs::read(b.path().join("m.csv")).unwrap();
    assert_eq!(x, y);
    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["simulate", "--random-sites", "5,3", "--years", "20", "--seed", "12", "--out", "m.csv"]);
    assert_ne!(x, std::fs::read(c.path().join("m.csv")).unwrap());
}
