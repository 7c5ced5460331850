use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn cotloop(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotloop")).arg("--runs").arg(runs).args(args).output().unwrap()
}

fn ok(output: Output) -> String {
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(output.status.success(), "exit {:?}: {stderr}", output.status);
    String::from_utf8(output.stdout).unwrap()
}

fn run_mcs(runs: &Path, run_id: &str, corrections: bool) -> String {
    let (dataset, replay, log) =
        (fixture("addsub10.jsonl"), fixture("addsub10.replay.jsonl"), fixture("addsub10.corrections.jsonl"));
    let mut args = vec![
        "run",
        "--dataset",
        dataset.to_str().unwrap(),
        "--task",
        "addsub",
        "--run-id",
        run_id,
        "--mode",
        "mcs",
        "--alpha",
        "0.4",
        "--n",
        "5",
        "--backend",
        "replay",
        "--replay",
        replay.to_str().unwrap(),
    ];
    if corrections {
        args.extend(["--corrections", log.to_str().unwrap()]);
    }
    ok(cotloop(runs, &args))
}

#[test]
fn camlop_optimum_prints_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let out =
        ok(cotloop(dir.path(), &["camlop", "optimum", "--c", "1", "--d", "1", "--m", "10", "--p1", "1", "--p2", "1"]));
    assert_eq!(out.trim(), "x1=5 x2=5");
}

#[test]
fn camlop_fit_reads_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("points.csv");
    let mut text = String::from("x1,x2,utility\n");
    for (x1, x2) in [(1.0f64, 2.0f64), (3.0, 1.5), (0.5, 4.0), (2.0, 2.0)] {
        text.push_str(&format!("{x1},{x2},{}\n", x1.powf(0.3) * x2.powf(0.8)));
    }
    std::fs::write(&csv, text).unwrap();
    let out = ok(cotloop(dir.path(), &["camlop", "fit", "--data", csv.to_str().unwrap()]));
    let fields: Vec<f64> = out.split_whitespace().map(|f| f.split_once('=').unwrap().1.parse().unwrap()).collect();
    assert!((fields[0] - 0.3).abs() < 1e-9 && (fields[1] - 0.8).abs() < 1e-9 && fields[2] < 1e-9, "{out}");
}

#[test]
fn camlop_plans_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(cotloop(dir.path(), &["camlop", "plans"]));
    assert!(out.lines().next().unwrap().starts_with("plan"));
    assert!(out.lines().any(|l| l.contains("0.5050") && l.contains("16.8")), "{out}");
}

#[test]
fn run_correct_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path();
    let out = run_mcs(runs, "r1", false);
    assert!(out.contains("queued 4, corrected 0, pending 4"), "{out}");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(runs.join("r1/report.json")).unwrap()).unwrap();
    assert_eq!(report["completed"], false);

    let ops = dir.path().join("ops.json");
    std::fs::write(&ops, r#"[{"kind": "delete", "index": 2}]"#).unwrap();
    let replay = fixture("addsub10.replay.jsonl");
    let replay = replay.to_str().unwrap();
    let out = ok(cotloop(
        runs,
        &[
            "correct",
            "--run-id",
            "r1",
            "--sample",
            "addsub-03",
            "--ops",
            ops.to_str().unwrap(),
            "--backend",
            "replay",
            "--replay",
            replay,
        ],
    ));
    assert!(out.contains("corrected 1, pending 3"), "{out}");

    let log = fixture("addsub10.corrections.jsonl");
    let out = ok(cotloop(
        runs,
        &["correct", "--run-id", "r1", "--log", log.to_str().unwrap(), "--backend", "replay", "--replay", replay],
    ));
    assert!(out.contains("accuracy 90.00% (9/10)") && out.contains("pending 0"), "{out}");

    let out = ok(cotloop(runs, &["report", "--run-id", "r1", "--threshold-sweep", "0.05,0.1,0.2,0.3,0.4,0.5"]));
    let rows: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 6);
    let at40 = rows.iter().find(|r| r["alpha"] == 0.4).unwrap();
    assert_eq!(at40["selected"], 4);
    assert_eq!(at40["accuracy"], 90.0);

    let csv = ok(cotloop(runs, &["report", "--run-id", "r1", "--threshold-sweep", "0.1,0.4", "--format", "csv"]));
    assert_eq!(csv.lines().count(), 3);
    let summary = ok(cotloop(runs, &["report", "--run-id", "r1"]));
    assert_eq!(summary.trim(), "r1\tmcs\t0.9");
    let partition: serde_json::Value =
        serde_json::from_str(&ok(cotloop(runs, &["report", "--run-id", "r1", "--partition"]))).unwrap();
    assert!(partition.get("part1").is_some());
    let roc: serde_json::Value =
        serde_json::from_str(&ok(cotloop(runs, &["report", "--run-id", "r1", "--roc"]))).unwrap();
    assert!(roc["auc"].as_f64().unwrap() >= 0.0);
}

#[test]
fn corrected_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    run_mcs(dir.path(), "a", true);
    run_mcs(dir.path(), "b", true);
    let a = std::fs::read(dir.path().join("a/report.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/report.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path();
    let failures: [&[&str]; 5] = [
        &["report", "--run-id", "missing"],
        &["camlop", "optimum", "--c", "0", "--d", "1", "--m", "10", "--p1", "1", "--p2", "1"],
        &["run", "--dataset", "/nonexistent.jsonl", "--backend", "replay", "--replay", "/nonexistent"],
        &["run", "--dataset", "x.jsonl", "--mode", "bogus"],
        &["correct", "--run-id", "missing"],
    ];
    for args in failures {
        let output = cotloop(runs, args);
        assert!(!output.status.success(), "{args:?} succeeded");
        assert!(!output.stderr.is_empty(), "{args:?} printed no error");
    }
}
