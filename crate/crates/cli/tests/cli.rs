use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fieldlearn"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn ansatz_finds_rotated_gradient() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["ansatz", "--constraint", "[dx1, dx2]", "--max-degree", "1"], d.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "[dx2; -dx1]");
    assert!(String::from_utf8_lossy(&o.stderr).contains("degree 1, potential dimension 1"));
}

#[test]
fn ansatz_reports_missing_transform() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["ansatz", "--constraint", "[dx1, dx2]", "--max-degree", "0"], d.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "NOT FOUND");
}

#[test]
fn config_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(&["ansatz", "--constraint", "[dx1, dq]"], d.path()).status.code(), Some(1));
    std::fs::write(d.path().join("c.json"), r#"{"study":"affine-demo"}"#).unwrap();
    let o = run(&["study", "strain-demo", "--config", "c.json", "--out", "o"], d.path());
    assert_eq!(o.status.code(), Some(1));
    std::fs::write(d.path().join("t.json"), r#"{"lr":-1}"#).unwrap();
    let o = run(
        &["train", "--model", "standard", "--field", "divfree", "--config", "t.json"],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["train", "--model", "standard", "--field", "nowhere"], d.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diverging_training_exits_with_two() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("t.json"), r#"{"lr":1e300,"epochs":5}"#).unwrap();
    let o = run(
        &[
            "train", "--model", "standard", "--field", "divfree", "--measurements", "20", "--hidden", "4",
            "--config", "t.json",
        ],
        d.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_writes_report_and_bundle() {
    let d = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "train", "--model", "constrained", "--field", "affine", "--measurements", "40", "--hidden", "8,4",
            "--epochs", "10", "--out", "run",
        ],
        d.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("exact       PASS"));
    assert!(text.contains("learned_rhs="));
    let report = std::fs::read_to_string(d.path().join("run/train_report.csv")).unwrap();
    assert!(report.starts_with("epoch,train_loss,val_loss,lr"));
    assert_eq!(report.lines().count(), 11);
    assert!(d.path().join("run/model.model.json").exists());
}

#[test]
fn synth_then_csv_study() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--points", "200", "--seed", "3", "--out", "f.csv"], d.path());
    assert!(o.status.success());
    let csv = std::fs::read_to_string(d.path().join("f.csv")).unwrap();
    assert_eq!(csv.lines().count(), 201);
    std::fs::write(
        d.path().join("c.json"),
        r#"{"study":"external-field","trials":2,"csv":"f.csv","measurements":[50],"hidden":[6,3],"train":{"epochs":5}}"#,
    )
    .unwrap();
    let o = run(&["study", "external-field", "--config", "c.json", "--out", "o"], d.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let res = std::fs::read_to_string(d.path().join("o/results.csv")).unwrap();
    assert_eq!(res.lines().count(), 1 + 2 * 2);
    for f in ["timings.csv", "manifest.json"] {
        assert!(d.path().join("o").join(f).exists());
    }
}
