use std::path::PathBuf;
use std::process::{Command, Output};

use cloudq::report::Table;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cloudq"))
}

fn instance_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../instances").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn small_instance(dir: &tempfile::TempDir) -> PathBuf {
    let path = dir.path().join("small.cfg");
    std::fs::write(
        &path,
        "regime = dbs\nlambda = 9\ntheta = 0.5\nC = 0.4\ntruncation = 12\nnode.m = 2\nnode.mu = 2\nnode.m = 3\nnode.mu = 1\n",
    )
    .unwrap();
    path
}

#[test]
fn split_writes_one_record() {
    let base = instance_file("base1.cfg");
    let o = run(&["split", "--instance", base.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = Table::read_csv(&stdout(&o)).unwrap();
    assert_eq!(t.name, "split");
    assert_eq!(t.rows.len(), 1);
    let total: f64 = (0..4).map(|k| t.rows[0][t.column(&format!("lambda_{k}")).unwrap()].as_f64().unwrap()).sum();
    assert!((total - 60.0).abs() < 1e-9);
}

#[test]
fn regime_override_changes_output() {
    let base = instance_file("base1.cfg");
    let a = stdout(&run(&["split", "-i", base.to_str().unwrap()]));
    let b = stdout(&run(&["split", "-i", base.to_str().unwrap(), "--regime", "des"]));
    assert!(a.contains(",dbs,") && b.contains(",des,"));
}

#[test]
fn out_flag_and_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let inst = small_instance(&dir);
    let out = dir.path().join("idx.jsonl");
    let o = run(&["indices", "-i", inst.to_str().unwrap(), "--format", "jsonl", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    let text = std::fs::read_to_string(out).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2 * 13);
    assert!(lines.iter().all(|v| v["table"] == "indices" && v["RB"].as_f64().unwrap() <= 1.0));
}

#[test]
fn evaluate_with_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let inst = small_instance(&dir);
    let o = run(&["evaluate", "-i", inst.to_str().unwrap(), "--gap", "--sequential"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = Table::read_csv(&stdout(&o)).unwrap();
    assert_eq!(t.rows.len(), 4);
    let gap = t.column("gap_pct").unwrap();
    assert!(t.rows.iter().all(|r| r[gap].as_f64().unwrap() >= -1e-6));
}

#[test]
fn solve_matches_evaluated_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let inst = small_instance(&dir);
    let solved = Table::read_csv(&stdout(&run(&["solve", "-i", inst.to_str().unwrap()]))).unwrap();
    let vi = Table::read_csv(&stdout(&run(&["solve", "-i", inst.to_str().unwrap(), "--method", "vi"]))).unwrap();
    let g = solved.column("gain").unwrap();
    let a = solved.rows[0][g].as_f64().unwrap();
    let b = vi.rows[0][g].as_f64().unwrap();
    assert!((a - b).abs() < 1e-8, "{a} vs {b}");
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let inst = small_instance(&dir);
    let args = ["simulate", "-i", inst.to_str().unwrap(), "--jobs", "2000", "--replications", "3", "--seed", "9"];
    let a = run(&args);
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&run(&args)));
}

#[test]
fn sweep_over_c() {
    let base = instance_file("base1.cfg");
    let o =
        run(&["sweep", "-i", base.to_str().unwrap(), "--param", "C", "--from", "0.1", "--to", "0.5", "--step", "0.1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = Table::read_csv(&stdout(&o)).unwrap();
    assert_eq!(t.rows.len(), 5);
    assert!(String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["split"]).status.code(), Some(1));
    let o = run(&["split", "-i", "/nonexistent/x.cfg"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_instance_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "regime = dbs\nlambda = 3\ntheta = x\n").unwrap();
    let o = run(&["split", "-i", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn numerical_failures_exit_two() {
    let base = instance_file("base1.cfg");
    let o = run(&["solve", "-i", base.to_str().unwrap(), "--state-cap", "1000"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn thread_variable_is_validated() {
    let base = instance_file("base1.cfg");
    let o = bin().args(["split", "-i", base.to_str().unwrap()]).env("CLOUDQ_THREADS", "zero").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = bin().args(["split", "-i", base.to_str().unwrap()]).env("CLOUDQ_THREADS", "1").output().unwrap();
    assert!(o.status.success());
}
