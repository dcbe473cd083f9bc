use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_robust-ecm"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn robust-ecm")
}

fn write_spec(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

/// Unstable scalar plant seen through identity perception with a generous
/// control range; the first training round certifies it.
const TOY: &str = r#"{
  "benchmark": "scalar",
  "perception": "identity",
  "control_bounds": [10.0],
  "adaptive": { "initial_n": 20 },
  "train": { "m1": 500, "epochs": 60, "batch_size": 25 },
  "eval": { "episodes": 50 }
}"#;

/// One short round that is certain to leave hard samples.
const HARD: &str = r#"{
  "benchmark": "cartpole",
  "adaptive": { "initial_n": 20, "max_iterations": 1, "hard_threshold": 0.0 },
  "train": { "m1": 40, "m2": 4, "epochs": 1, "batch_size": 20, "width": 8 },
  "eval": { "episodes": 20 }
}"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toy_synthesis_succeeds_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_spec(tmp.path(), "toy.json", TOY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = run(&["synthesize", "--config", s(&cfg), "--out", s(dir)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let ev = run(&["evaluate", "--config", s(&cfg), "--out", s(dir)]);
        assert_eq!(ev.status.code(), Some(0), "{}", String::from_utf8_lossy(&ev.stderr));
        let stdout = String::from_utf8(ev.stdout).unwrap();
        assert!(stdout.starts_with("unsafe_ratio="), "{stdout}");
    }
    for f in ["manifest.json", "barrier.json", "controller.json", "gp_model.json", "iter_0/dataset.csv", "eval_report.json"] {
        let (x, y) = (fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        assert!(x == y, "{f} differs between identical runs");
    }
    assert!(!a.join("hard_samples.json").exists());
}

#[test]
fn failed_synthesis_exits_2_with_hard_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_spec(tmp.path(), "hard.json", HARD);
    let dir = tmp.path().join("run");
    let out = run(&["synthesize", "--config", s(&cfg), "--out", s(&dir)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let hard: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("hard_samples.json")).unwrap()).unwrap();
    assert!(!hard.as_array().unwrap().is_empty());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["outcome"], "failure");
    assert!(!manifest["hard_samples"].as_array().unwrap().is_empty());
}

#[test]
fn unwritable_output_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_spec(tmp.path(), "hard.json", HARD);
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = run(&["synthesize", "--config", s(&cfg), "--out", s(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn zero_control_evaluation_prints_one() {
    let tmp = tempfile::tempdir().unwrap();
    for b in ["dubins", "cartpole", "lanekeep"] {
        let dir = tmp.path().join(b);
        let out = run(&["evaluate", "--zero-control", "--benchmark", b, "--out", s(&dir)]);
        assert_eq!(out.status.code(), Some(0));
        assert_eq!(String::from_utf8(out.stdout).unwrap(), "unsafe_ratio=1.000\n");
        assert!(dir.join("eval_report.json").exists());
    }
    let again = tmp.path().join("again");
    run(&["evaluate", "--zero-control", "--benchmark", "dubins", "--out", s(&again)]);
    assert_eq!(
        fs::read(again.join("eval_report.json")).unwrap(),
        fs::read(tmp.path().join("dubins/eval_report.json")).unwrap()
    );
}

#[test]
fn evaluation_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = run(&["evaluate", "--benchmark", "dubins", "--run", s(&tmp.path().join("nope")), "--out", s(tmp.path())]);
    assert_eq!(missing.status.code(), Some(1));

    // A cart-pole controller cannot drive Dubins.
    let cfg = write_spec(tmp.path(), "hard.json", HARD);
    let dir = tmp.path().join("cp");
    run(&["synthesize", "--config", s(&cfg), "--out", s(&dir)]);
    let mismatch = run(&["evaluate", "--benchmark", "dubins", "--run", s(&dir), "--out", s(tmp.path())]);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("controller"));
}

#[test]
fn bad_flags_exit_1() {
    let out = run(&["evaluate", "--zero-control", "--benchmark", "bicycle"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["evaluate", "--zero-control", "--strategy", "greedy"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["synthesize", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_spec(
        tmp.path(),
        "sweep.json",
        r#"{
  "benchmark": "cartpole",
  "adaptive": { "initial_n": 10, "max_iterations": 2 },
  "train": { "m1": 30, "m2": 4, "epochs": 1, "batch_size": 15, "width": 8 },
  "eval": { "episodes": 10 }
}"#,
    );
    let out = run(&["sweep", "--config", s(&cfg), "--budgets", "10,14", "--seeds", "2", "--jobs", "2", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "benchmark,strategy,n_samples,unsafe_ratio,seed");
    // adaptive and uniform: 2 budgets x 2 seeds; nogp: one row per seed
    assert_eq!(lines.len() - 1, 2 * 2 * 2 + 2);
    let nogp: Vec<&&str> = lines.iter().filter(|l| l.contains(",nogp,")).collect();
    assert_eq!(nogp.len(), 2);
    assert!(nogp.iter().all(|l| l.split(',').nth(2) == Some("0")));
    for l in &lines[1..] {
        let ratio = l.split(',').nth(3).unwrap();
        assert!(ratio == "NA" || (0.0..=1.0).contains(&ratio.parse::<f64>().unwrap()), "{l}");
    }
    let bad = run(&["sweep", "--config", s(&cfg), "--budgets", "14,10", "--out", s(tmp.path())]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn density_writes_one_histogram_per_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write_spec(tmp.path(), "a.csv", "xhat0,xhat1,x0,x1\n0.1,0.2,0.1,0.2\n-1,1,-1,1\n2,2,2,2\n");
    let b = write_spec(tmp.path(), "b.csv", "xhat0,xhat1,x0,x1\n0,0,0,0\n");
    let out = run(&["density", "--benchmark", "lanekeep", "--bins", "4", "--out", s(tmp.path()), s(&a), s(&b)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for (k, total) in [(0, 3), (1, 1)] {
        let h = fs::read_to_string(tmp.path().join(format!("density_{k}.csv"))).unwrap();
        let sum: usize = h
            .lines()
            .filter(|l| !l.starts_with('#'))
            .flat_map(|l| l.split(',').map(|c| c.parse::<usize>().unwrap()))
            .sum();
        assert_eq!(sum, total);
    }
    let junk = write_spec(tmp.path(), "junk.csv", "not a dataset\n1,2\n");
    let out = run(&["density", "--benchmark", "lanekeep", "--out", s(tmp.path()), s(&junk)]);
    assert_eq!(out.status.code(), Some(1));
}
