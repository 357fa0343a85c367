use std::path::Path;
use std::process::Command;

use dcpinn::output::read_density;

fn dcpinn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dcpinn"))
}

fn write_config(dir: &Path, mode: &str, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"mode = "{mode}"

[problem]
name = "cantilever2d"
nx = 12
ny = 4

[opt]
max_cycles = 2
epochs_backbone = 4
epochs_coefficient = 2
{extra}

[net]
fourier_features = 8
hidden_width = 16
coef_width = 8
"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn two_cycle_runs_write_matching_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fem", "");
    let mut headers = Vec::new();
    for mode in ["fem", "dcpinn"] {
        let out = dir.path().join(mode);
        let status = dcpinn()
            .args(["solve", "--quiet", "--config"])
            .arg(&cfg)
            .args(["--mode", mode, "--seed", "3", "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
        let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
        assert_eq!(history.lines().count(), 3, "{mode}: header plus two rows");
        headers.push(header(&out.join("history.csv")));
        let snap = read_density(&out.join("density_0002.txt")).unwrap();
        assert_eq!(snap.counts, [12, 4, 1]);
        assert_eq!(snap.cycle, 2);
        assert!(out.join("density_0001.pgm").exists());
    }
    assert_eq!(headers[0], headers[1]);
}

#[test]
fn same_seed_reproduces_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dcpinn", "");
    let mut rows = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("r{k}"));
        let status = dcpinn().args(["solve", "--quiet", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
        assert!(status.success());
        // the last column is wall time
        let text = std::fs::read_to_string(out.join("history.csv")).unwrap();
        rows.push(text.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>());
    }
    assert_eq!(rows[0], rows[1]);
}

#[test]
fn config_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fem", "no_such_key = 1");
    assert_eq!(dcpinn().args(["solve", "--config"]).arg(&cfg).status().unwrap().code(), Some(1));
    let missing = dir.path().join("missing.toml");
    assert_eq!(dcpinn().args(["solve", "--config"]).arg(&missing).status().unwrap().code(), Some(1));
    let cfg = write_config(dir.path(), "fem", "");
    assert_eq!(dcpinn().args(["solve", "--mode", "magic", "--config"]).arg(&cfg).status().unwrap().code(), Some(1));
}

#[test]
fn aborted_runs_exit_with_2_and_keep_outputs() {
    let dir = tempfile::tempdir().unwrap();
    // every projected density sits below τ, so the active set is empty
    let cfg = write_config(dir.path(), "dcpinn", "tau = 0.999");
    let out = dir.path().join("out");
    let status = dcpinn().args(["solve", "--quiet", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(2));
    assert_eq!(std::fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 1);
}

#[test]
fn verify_reports_pass_lines() {
    let out = dcpinn().args(["verify", "--suite", "oracles"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 4);
    assert!(!text.contains("FAIL"));
    assert_eq!(dcpinn().args(["verify", "--suite", "bogus"]).status().unwrap().code(), Some(1));
}
