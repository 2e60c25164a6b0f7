use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use racbf::dynamics::AgentState;
use racbf::responsibility::{read_model, write_model, Responsibility};

const SMALL: &str = r#"
seed = 3
[scenario]
horizon = 4.0
[data.suite]
car_follow = 4
merge = 2
[train]
epochs = 5
hidden = [16, 16]
[simulate.suite]
car_follow = 3
intersection = 2
"#;

fn racbf(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_racbf")).args(args).current_dir(dir).output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let p = dir.path().to_path_buf();
    (dir, p)
}

fn pipeline(dir: &Path, out: &str) {
    ok(&racbf(&["gen-data", "--config", "small.toml", "--out", out], dir));
    ok(&racbf(&["train", "--config", "small.toml", "--out", out], dir));
    ok(&racbf(&["simulate", "--config", "small.toml", "--out", out], dir));
}

fn first_scenario(csv: &Path) -> String {
    let text = std::fs::read_to_string(csv).unwrap();
    text.lines().nth(1).unwrap().split(',').next().unwrap().to_string()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let (_d, dir) = setup();
    pipeline(&dir, "o");
    let o = dir.join("o");
    for f in ["dataset.csv", "audit.csv", "model.bin", "training_log.csv", "validation.csv", "metrics.csv"] {
        assert!(o.join(f).is_file(), "{f}");
    }
    let metrics = std::fs::read_to_string(o.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(
        lines[0],
        "suite,mode,validation_constraint_violation,closed_loop_safety_violation,time_spent_off_road,distance_covered,closed_loop_constraint_violation"
    );
    let modes: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(modes, ["worst", "even", "learned"]);
    for mode in &modes {
        assert!(o.join(format!("trajectories_{mode}.csv")).is_file());
    }
    assert_eq!(std::fs::read_to_string(o.join("training_log.csv")).unwrap().lines().count(), 6);

    let traj = o.join("trajectories_even.csv");
    let id = first_scenario(&traj);
    let out = racbf(
        &["analyze", "--config", "small.toml", "--out", "o", "--trajectory", traj.to_str().unwrap(), "--model", "o/model.bin", "--scenario", &id, "--plot"],
        &dir,
    );
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("interpretive aid only"));
    let series = std::fs::read_to_string(o.join("forensic_series.csv")).unwrap();
    assert!(series.starts_with("schema_version,step,t,agent_id,other_id,gamma,c,margin,worst_case_margin"));
    assert!(o.join("forensic_summary.csv").is_file());
    let svg = std::fs::read_to_string(o.join("forensic.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.matches("<polyline").count() >= 8);

    // Differentiated ingestion of the same rows also succeeds.
    ok(&racbf(
        &["analyze", "--out", "o2", "--trajectory", traj.to_str().unwrap(), "--mode", "even", "--scenario", &id, "--differentiate"],
        &dir,
    ));
}

#[test]
fn outputs_are_byte_identical_for_identical_seeds() {
    let (_d, dir) = setup();
    pipeline(&dir, "a");
    pipeline(&dir, "b");
    for f in ["dataset.csv", "audit.csv", "model.bin", "training_log.csv", "metrics.csv", "trajectories_learned.csv"] {
        assert_eq!(std::fs::read(dir.join("a").join(f)).unwrap(), std::fs::read(dir.join("b").join(f)).unwrap(), "{f}");
    }
    ok(&racbf(&["gen-data", "--config", "small.toml", "--out", "c", "--seed", "7"], &dir));
    assert_ne!(std::fs::read(dir.join("a/dataset.csv")).unwrap(), std::fs::read(dir.join("c/dataset.csv")).unwrap());
}

#[test]
fn thread_cap_does_not_change_results() {
    let (_d, dir) = setup();
    ok(&racbf(&["gen-data", "--config", "small.toml", "--out", "a"], &dir));
    let capped = Command::new(env!("CARGO_BIN_EXE_racbf"))
        .args(["gen-data", "--config", "small.toml", "--out", "b"])
        .env("RACBF_THREADS", "1")
        .current_dir(&dir)
        .output()
        .unwrap();
    ok(&capped);
    assert_eq!(std::fs::read(dir.join("a/dataset.csv")).unwrap(), std::fs::read(dir.join("b/dataset.csv")).unwrap());
}

#[test]
fn saved_model_reloads_exactly() {
    let (_d, dir) = setup();
    ok(&racbf(&["gen-data", "--config", "small.toml", "--out", "o"], &dir));
    ok(&racbf(&["train", "--config", "small.toml", "--out", "o"], &dir));
    let bytes = std::fs::read(dir.join("o/model.bin")).unwrap();
    let a = read_model(bytes.as_slice()).unwrap();
    let b = read_model(bytes.as_slice()).unwrap();
    let mut again = Vec::new();
    write_model(&a, &mut again).unwrap();
    assert_eq!(again, bytes);
    for k in 0..50 {
        let si = AgentState::new(0.0, 0.0, 5.0, 0.1 * k as f64);
        let sj = AgentState::new(3.0 + k as f64 * 0.2, 1.0, 4.0, 0.0);
        assert!((a.gamma(si, sj) - b.gamma(si, sj)).abs() <= 1e-12);
    }
}

#[test]
fn inputs_are_not_modified() {
    let (_d, dir) = setup();
    ok(&racbf(&["gen-data", "--config", "small.toml", "--out", "o"], &dir));
    let before = std::fs::read(dir.join("o/dataset.csv")).unwrap();
    ok(&racbf(&["train", "--config", "small.toml", "--out", "o"], &dir));
    assert_eq!(std::fs::read(dir.join("o/dataset.csv")).unwrap(), before);
    assert_eq!(std::fs::read_to_string(dir.join("small.toml")).unwrap(), SMALL);
}

#[test]
fn usage_errors_exit_with_two() {
    let (_d, dir) = setup();
    std::fs::write(dir.join("bad_kind.toml"), "[data.suite]\nroundabout = 2\n").unwrap();
    let out = racbf(&["gen-data", "--config", "bad_kind.toml", "--out", "o"], &dir);
    assert_eq!(out.status.code(), Some(2));
    for kind in ["car_follow", "intersection", "merge", "random"] {
        assert!(stderr(&out).contains(kind), "{}", stderr(&out));
    }

    std::fs::write(dir.join("typo.toml"), "[train]\nepoch = 3\n").unwrap();
    let out = racbf(&["gen-data", "--config", "typo.toml"], &dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("epoch"), "{}", stderr(&out));

    assert_eq!(racbf(&["frobnicate"], &dir).status.code(), Some(2));
    assert_eq!(racbf(&["simulate", "--mode", "sideways"], &dir).status.code(), Some(2));
    assert_eq!(racbf(&["gen-data", "--config", "absent.toml"], &dir).status.code(), Some(2));
    assert_eq!(racbf(&["train", "--out", "empty"], &dir).status.code(), Some(2));

    let out = racbf(&["analyze", "--trajectory", "small.toml", "--model", "missing.bin"], &dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.bin"));

    let threads = Command::new(env!("CARGO_BIN_EXE_racbf")).args(["gen-data"]).env("RACBF_THREADS", "0").current_dir(&dir).output().unwrap();
    assert_eq!(threads.status.code(), Some(2));
}

#[test]
fn corrupt_model_reports_offset() {
    let (_d, dir) = setup();
    ok(&racbf(&["gen-data", "--config", "small.toml", "--out", "o"], &dir));
    ok(&racbf(&["train", "--config", "small.toml", "--out", "o"], &dir));
    let bytes = std::fs::read(dir.join("o/model.bin")).unwrap();
    std::fs::write(dir.join("cut.bin"), &bytes[..bytes.len() / 2]).unwrap();
    let out = racbf(&["simulate", "--config", "small.toml", "--out", "o", "--model", "cut.bin"], &dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("offset"), "{}", stderr(&out));
}

#[test]
fn mixed_scenarios_need_selection() {
    let (_d, dir) = setup();
    ok(&racbf(&["simulate", "--config", "small.toml", "--out", "o", "--mode", "even"], &dir));
    let metrics = std::fs::read_to_string(dir.join("o/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let out = racbf(&["analyze", "--out", "o", "--trajectory", "o/trajectories_even.csv", "--mode", "even"], &dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("mixes scenarios"));
}

#[test]
fn runtime_failures_exit_with_one() {
    let (_d, dir) = setup();
    std::fs::write(dir.join("blocker"), "not a directory").unwrap();
    let out = racbf(&["gen-data", "--config", "small.toml", "--out", "blocker/sub"], &dir);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}
