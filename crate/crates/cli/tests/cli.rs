use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mirror-po"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line:?}"))
        .parse()
        .unwrap()
}

#[test]
fn verify_theorem_on_the_default_env() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify-theorem", "--potential", "neg_entropy"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(field(&stdout(&o), "max_spread") <= 1e-4);
}

#[test]
fn shuffled_size_must_divide_by_four() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["gen-data", "--mode", "shuffled", "--size", "510", "--out", "d.txt"],
        dir.path(),
    );
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind=config "), "{err}");
    assert!(err.contains("divisible by 4"), "{err}");
    assert!(!dir.path().join("d.txt").exists());
}

#[test]
fn train_reports_every_seed_and_a_footer() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["gen-data", "--size", "64", "--seed", "5", "--out", "d.txt"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(
        &["train", "--data", "d.txt", "--seeds", "25", "--out", "runs"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("runs/summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 25 + 2);
    assert_eq!(lines[0], "seed,run_seed,final_value");
    assert!(lines[26].starts_with("mean,,"));
    assert!(lines[27].starts_with("stderr,,"));
    let values: Vec<f64> = lines[1..26]
        .iter()
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    let mean = values.iter().sum::<f64>() / 25.0;
    assert!((mean - field(&stdout(&o), "mean")).abs() < 1e-12);
}

#[test]
fn config_errors_list_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.toml"),
        "seeed = 1\n[trainer]\nepochs = 0\nlearning_rate = -1.0\n[es]\npopulation = 3\n",
    )
    .unwrap();
    let o = run(&["evolve", "--config", "bad.toml", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    // Unknown keys are reported before values are checked.
    assert!(stderr(&o).contains("unknown key `seeed`"), "{}", stderr(&o));
    std::fs::write(
        dir.path().join("bad.toml"),
        "[trainer]\nepochs = 0\nlearning_rate = -1.0\n[es]\npopulation = 3\n",
    )
    .unwrap();
    let o = run(&["evolve", "--config", "bad.toml", "--out", "x"], dir.path());
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    for needle in ["trainer.epochs", "trainer.learning_rate", "es.population"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }
}

#[test]
fn usage_errors_are_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr(&o).lines().count(), 1);
    assert!(stderr(&o).starts_with("error kind=usage "));
}

#[test]
fn worker_variable_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["verify-theorem"])
        .env("MIRROR_PO_WORKERS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("MIRROR_PO_WORKERS"));
}

#[test]
fn rerun_detects_tampered_artifacts_and_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(run(&["gen-data", "--size", "32", "--out", "d.txt"], p).status.success());
    assert!(run(&["train", "--data", "d.txt", "--seeds", "2", "--out", "t"], p)
        .status
        .success());
    let o = run(&["rerun", "--manifest", "t/manifest.toml", "--out", "t2"], p);
    assert!(o.status.success(), "{}", stderr(&o));

    let manifest = std::fs::read_to_string(p.join("t/manifest.toml")).unwrap();
    let summary_hash = manifest
        .split("[[artifacts]]")
        .find(|s| s.contains("name = \"summary.csv\""))
        .and_then(|s| s.lines().find_map(|l| l.strip_prefix("sha256 = ")))
        .unwrap()
        .trim_matches('"')
        .to_string();
    std::fs::write(
        p.join("t/manifest.toml"),
        manifest.replace(&summary_hash, &"0".repeat(64)),
    )
    .unwrap();
    let o = run(&["rerun", "--manifest", "t/manifest.toml", "--out", "t3"], p);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kind=mismatch") && stderr(&o).contains("summary.csv"));

    std::fs::write(p.join("t/manifest.toml"), &manifest).unwrap();
    std::fs::write(p.join("d.txt"), "changed").unwrap();
    let o = run(&["rerun", "--manifest", "t/manifest.toml", "--out", "t4"], p);
    assert!(stderr(&o).contains("input data"), "{}", stderr(&o));
}
