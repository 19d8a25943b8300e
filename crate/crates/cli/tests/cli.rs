use std::path::Path;
use std::process::{Command, Output};

fn data_dir() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .display()
        .to_string()
}

fn run(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cimnas"))
        .current_dir(cwd)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["eval", "--model", "m.cimw", "--sigma", "0.1", "--variance", "0.01"],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_are_one_categorised_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["eval", "--model", "missing.cimw", "--out", "e.json"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: io: "), "{err}");

    let o = run(dir.path(), &["train", "--epochs", "0", "--out", "m.cimw"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: argument: "), "{}", stderr(&o));
    assert!(!dir.path().join("m.cimw").exists());
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dd = data_dir();
    let small = ["--train-size", "200", "--test-size", "100"];
    let mut args = vec![
        "--data-dir",
        dd.as_str(),
        "train",
        "--epochs",
        "1",
        "--width",
        "8",
        "--out",
        "m.cimw",
    ];
    args.extend(small);
    let o = run(d, &args);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "m.cimw",
        "m.cimw.arch.json",
        "m.cimw.train.json",
        "m.cimw.manifest.json",
    ] {
        assert!(d.join(f).exists(), "{f}");
    }

    let o = run(
        d,
        &[
            "--data-dir",
            dd.as_str(),
            "eval",
            "--model",
            "m.cimw",
            "--test-size",
            "100",
            "-k",
            "4",
            "--out",
            "e.json",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("e.json")).unwrap()).unwrap();
    let dist = &eval["distribution"];
    assert_eq!(dist["samples"].as_array().unwrap().len(), 4);
    assert!(dist["p95min"].as_f64().unwrap() <= dist["max"].as_f64().unwrap());

    let o = run(d, &["report", "e.json", "--json", "r.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("e.json") && text.contains("0.2"), "{text}");
    assert!(d.join("r.json").exists());
    assert!(d.join("r.json.manifest.json").exists());
}

#[test]
fn replay_detects_tampered_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dd = data_dir();
    let o = run(
        d,
        &[
            "--data-dir",
            dd.as_str(),
            "train",
            "--epochs",
            "1",
            "--width",
            "8",
            "--train-size",
            "100",
            "--test-size",
            "50",
            "--out",
            "m.cimw",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = d.join("m.cimw.manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    m["outputs"][0]["sha256"] = serde_json::Value::String("0".repeat(64));
    std::fs::write(&manifest, m.to_string()).unwrap();
    let o = run(d, &["replay", "m.cimw.manifest.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("MISMATCH"));
    assert!(stderr(&o).starts_with("error: replay: "), "{}", stderr(&o));
}

#[test]
fn usage_error_names_the_missing_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["eval", "--model", "m.cimw"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: usage: ") && err.contains("--out"), "{err}");
}
