use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
m = 2
a = 1.0
b = 2.0
depth = 3
targets = [[[1.0, 0.0], [0.0, 1.0]]]

[simulation]
level = 3
replicates = 400
seed = 11

[mixing]
window = 8
block_windows = [1, 8]
max_gap = 32
"#;

fn wobble(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wobble")).args(args).current_dir(dir).output().expect("run wobble")
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--config", "run.toml"];
    all.extend_from_slice(args);
    wobble(&all, dir)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn decompose_worked_example_csv() {
    let dir = setup(SMALL);
    let o = run(dir.path(), &["decompose", "--out", "out", "--format", "csv"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let csv = std::fs::read_to_string(dir.path().join("out/decomposition.csv")).unwrap();
    let row = |block: &str| {
        csv.lines()
            .find(|l| l.contains(&format!("{block},")) || l.contains(&format!("\"{block}\",")))
            .and_then(|l| l.rsplit(',').next())
            .map(|v| v.parse::<f64>().unwrap())
            .unwrap()
    };
    assert!((row("q2[0]") - 13.0 / 80.0).abs() < 1e-12);
    assert!((row("q2[1]") - 13.0 / 80.0).abs() < 1e-12);
    assert!((row("q3[0,1]") - 3.0 / 80.0).abs() < 1e-12);
    assert!(!dir.path().join("out/report.json").exists());
}

#[test]
fn construct_passes_and_corrupt_cstar_fails() {
    let dir = setup(SMALL);
    let ok = run(dir.path(), &["construct", "--out", "a"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    let bad = run(dir.path(), &["construct", "--out", "b", "--inject-fault", "corrupt-cstar"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("FAIL construction.level[2].coefficients"));
}

#[test]
fn simulate_faults_fail() {
    let dir = setup(SMALL);
    let ok = run(dir.path(), &["simulate", "--out", "a"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    // G*_3 is close to the identity, so the wrong whitening needs more replicates to show
    let wrong =
        run(dir.path(), &["simulate", "--out", "b", "--replicates", "4000", "--inject-fault", "wrong-normalization"]);
    assert_eq!(wrong.status.code(), Some(1));
    assert!(stdout(&wrong).contains("FAIL simulation.normality"));
    let drop = run(dir.path(), &["simulate", "--out", "c", "--inject-fault", "drop-block"]);
    assert_eq!(drop.status.code(), Some(1));
    assert!(stdout(&drop).contains("FAIL simulation.error"));
    assert!(dir.path().join("c/report.json").exists());
}

#[test]
fn full_is_deterministic_and_has_schema() {
    let dir = setup(SMALL);
    let a = run(dir.path(), &["full", "--out", "a", "--seed", "5", "--format", "json"]);
    let b = run(dir.path(), &["full", "--out", "b", "--seed", "5", "--format", "json"]);
    assert_eq!(a.status.code(), b.status.code());
    let ja = std::fs::read_to_string(dir.path().join("a/report.json")).unwrap();
    let jb = std::fs::read_to_string(dir.path().join("b/report.json")).unwrap();
    // the echoed output directory is the only difference
    assert_eq!(ja.replace("\"dir\": \"a\"", "\"dir\": \"b\""), jb);

    let v: serde_json::Value = serde_json::from_str(&ja).unwrap();
    for key in ["config", "constants", "levels", "simulation", "mixing", "checks", "schema_version"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["config"]["input"]["simulation"]["seed"], 5);
    assert_eq!(v["config"]["normalizations"][0]["field"], "a");

    let c = run(dir.path(), &["full", "--out", "c", "--seed", "6", "--format", "json"]);
    assert_eq!(a.status.code(), c.status.code());
    let jc = std::fs::read_to_string(dir.path().join("c/report.json")).unwrap();
    assert_ne!(ja.replace("\"dir\": \"a\"", "\"dir\": \"c\""), jc);
}

#[test]
fn report_config_reruns_identically() {
    let dir = setup(SMALL);
    run(dir.path(), &["simulate", "--out", "a", "--format", "json"]);
    let again = wobble(&["simulate", "--config", "a/report.json", "--out", "b", "--format", "json"], dir.path());
    assert!(again.status.success());
    let ja = std::fs::read_to_string(dir.path().join("a/report.json")).unwrap();
    let jb = std::fs::read_to_string(dir.path().join("b/report.json")).unwrap();
    // only the output directory differs
    assert_eq!(ja.replace("\"dir\": \"a\"", "\"dir\": \"b\""), jb);
}

#[test]
fn invalid_config_names_field() {
    let dir = setup(&SMALL.replace("[[1.0, 0.0], [0.0, 1.0]]", "[[2.0, 0.5], [0.5, 2.0]]"));
    let o = run(dir.path(), &["decompose"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("targets[0]") && err.contains("eigenvalue 2.5"), "{err}");

    let dir = setup(&SMALL.replace("a = 1.0", "a = 3.0"));
    let o = run(dir.path(), &["decompose"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_fault_is_rejected() {
    let dir = setup(SMALL);
    let o = run(dir.path(), &["construct", "--inject-fault", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}
