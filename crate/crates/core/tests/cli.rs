use std::path::Path;
use std::process::{Command, Output};

use fscil_seg::datamodel::Manifest;
use fscil_seg::network::ModelSnapshot;

fn fscil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fscil"))
        .args(args)
        .env_remove("FSCIL_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_count_pairs_and_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&fscil(&["synth", "--out", p(&a), "--count", "250", "--seed", "4"]));
    ok(&fscil(&["synth", "--out", p(&b), "--count", "250", "--seed", "4"]));
    assert_eq!(std::fs::read_dir(a.join("images")).unwrap().count(), 250);
    assert_eq!(std::fs::read_dir(a.join("labels")).unwrap().count(), 250);
    let m = Manifest::load(&a.join("manifest.json")).unwrap();
    assert_eq!(m.base.len() + m.labeled.len() + m.unlabeled.len() + m.validation.len(), 250);
    assert_eq!(m.archetypes.len(), 250);
    assert!(m.archetypes.values().all(|&k| k < 4));
    assert_eq!(tree(&a), tree(&b));
}

fn small_dataset(root: &Path) -> std::path::PathBuf {
    let data = root.join("data");
    ok(&fscil(&[
        "synth", "--out", p(&data), "--base", "16", "--labeled", "20", "--unlabeled", "20",
        "--validation", "6", "--seed", "2",
    ]));
    data
}

const FAST: [&str; 6] = ["--epochs-base", "2", "--epochs-phase1", "2", "--epochs-phase2", "2"];

#[test]
fn train_increment_evaluate_round() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let out = tmp.path().join("runs");
    let mut args = vec!["train-base", "--data", p(&data), "--out", p(&out)];
    args.extend(FAST);
    ok(&fscil(&args));
    assert!(out.join("step1/model.snap").is_file());
    assert!(out.join("train-base.config.json").is_file());

    let mut args = vec!["increment", "--data", p(&data), "--out", p(&out), "--shots", "2", "--k-neighbors", "3"];
    args.extend(FAST);
    ok(&fscil(&args));
    let step2 = out.join("step2");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(step2.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "FT+KD+PL");
    assert!(report["phase2"].is_object());
    assert_ne!(
        std::fs::read(step2.join("initial.snap")).unwrap(),
        std::fs::read(step2.join("model.snap")).unwrap()
    );

    let snap = step2.join("model.snap");
    let stdout = ok(&fscil(&[
        "evaluate", "--data", p(&data), "--out", p(&out), "--snapshot", p(&snap), "--tasks", "1,2,union",
    ]));
    let header = stdout.lines().next().unwrap();
    assert_eq!(header.split_whitespace().collect::<Vec<_>>(), ["step", "T1", "T2", "T1∪2"]);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics_step2.json")).unwrap()).unwrap();
    assert_eq!(metrics["task_sets"].as_array().unwrap().len(), 3);
}

#[test]
fn increment_without_pl_keeps_phase1_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let out = tmp.path().join("runs");
    let mut args = vec!["train-base", "--data", p(&data), "--out", p(&out)];
    args.extend(FAST);
    ok(&fscil(&args));
    let mut args = vec!["increment", "--data", p(&data), "--out", p(&out), "--shots", "2", "--no-pl"];
    args.extend(FAST);
    ok(&fscil(&args));
    let step2 = out.join("step2");
    let init = ModelSnapshot::load(&step2.join("initial.snap")).unwrap();
    let fin = ModelSnapshot::load(&step2.join("model.snap")).unwrap();
    assert_eq!(init.hash(), fin.hash());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(step2.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "FT+KD");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let out = tmp.path().join("runs");

    // missing previous-step snapshot names the step it expected
    let r = fscil(&["increment", "--data", p(&data), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("step 1"));

    let r = fscil(&["experiment", "--data", p(&data), "--out", p(&out), "--tau", "1.5"]);
    assert_eq!(r.status.code(), Some(2));

    let r = fscil(&["train-base", "--data", p(&tmp.path().join("nope")), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(3));

    // overlapping tasks are rejected before any compute
    let bad = tmp.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"tasks":[{"classes":["sky","road"]},{"classes":["road","car"]}]}"#,
    )
    .unwrap();
    let r = fscil(&["train-base", "--data", p(&data), "--out", p(&out), "--schedule", p(&bad)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.join("step1").exists());

    let r = fscil(&["no-such-command"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let out = tmp.path().join("from-env");
    let mut args = vec!["train-base", "--data", p(&data)];
    args.extend(FAST);
    let r = Command::new(env!("CARGO_BIN_EXE_fscil"))
        .args(&args)
        .env("FSCIL_OUT", &out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(&r);
    assert!(out.join("step1/model.snap").is_file());
}

#[test]
fn experiment_writes_table_and_json() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let out = tmp.path().join("runs");
    let mut args = vec![
        "experiment", "--data", p(&data), "--out", p(&out), "--runs", "2", "--shots", "2",
        "--k-neighbors", "3",
    ];
    args.extend(FAST);
    let stdout = ok(&fscil(&args));
    assert!(stdout.contains("FT+KD+PL"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("experiment.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    assert!(report["comparisons"].as_array().unwrap().iter().any(|c| c["task_set"] == "T1∪2"));
    assert_eq!(std::fs::read_to_string(out.join("experiment.txt")).unwrap(), stdout);
}
