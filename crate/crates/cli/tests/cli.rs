//! The `octmh` binary: file contract, error lines and exit codes.

mod common;

use common::{assert_ok, error_kind, fixture, octmh, pipeline, run_with};
use serde_json::{json, Value};

#[test]
fn pipeline_writes_the_documented_files() {
    let root = tempfile::tempdir().unwrap();
    pipeline(root.path(), 30, 32, 10, 10);
    let r = root.path();
    for i in 0..10 {
        for ext in ["json", "opwt"] {
            assert!(r.join(format!("vision/run_{i}.{ext}")).is_file(), "vision run_{i}.{ext}");
        }
        assert!(r.join(format!("regression/run_{i}.json")).is_file());
        assert!(r.join(format!("fusion/run_{i}.json")).is_file());
    }
    assert!(!r.join("vision/run_10.json").exists());
    assert!(r.join("regression/model.json").is_file());
    for f in ["report.md", "report.csv", "results.svg", "importance.svg"] {
        assert!(r.join("report").join(f).is_file(), "{f}");
    }
    for d in ["data", "vision", "regression", "fusion", "eval", "report"] {
        let resolved: Value =
            serde_json::from_slice(&std::fs::read(r.join(d).join("resolved_config.json")).unwrap()).unwrap();
        assert!(resolved["command"].is_string(), "{d}");
        assert!(resolved["config"].is_object(), "{d}");
    }
    let md = std::fs::read_to_string(r.join("report/report.md")).unwrap();
    for row in ["| Regression | Clinical data |", "| CNN | CBR-Tiny |", "| Regression + CNN | Clinical data + CNN predictions |"] {
        assert!(md.contains(row), "{row} missing from\n{md}");
    }
    // the clinical-only model is identical across replicates
    let eval: Value = serde_json::from_slice(&std::fs::read(r.join("eval/evaluation.json")).unwrap()).unwrap();
    let clinical = eval["table"]["rows"]
        .as_array()
        .unwrap()
        .iter()
        .find(|row| row["config"] == "Clinical data")
        .unwrap();
    assert_eq!(clinical["metrics"]["auroc"]["ci95"], 0.0);
}

#[test]
fn evaluate_without_inputs_fails_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval");
    let o = octmh(&["evaluate", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(o.stdout.is_empty());
    assert!(!error_kind(&o).is_empty());
    assert!(!out.join("evaluation.json").exists());
}

#[test]
fn evaluate_of_empty_result_directories_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let out = dir.path().join("eval");
    let o = octmh(&["evaluate", "--out", out.to_str().unwrap(), "--input", a.to_str().unwrap(), "--input", b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.join("evaluation.json").exists());
}

#[test]
fn unknown_preset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = octmh(&[
        "train-vision",
        "--preset",
        "rn-imaginary",
        "--dataset",
        "nowhere.csv",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "config");
}

#[test]
fn unknown_flags_and_config_fields_exit_with_2() {
    let o = octmh(&["synth-gen", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "usage");
    let dir = tempfile::tempdir().unwrap();
    let o = run_with("synth-gen", &json!({"out": dir.path(), "bogus": 1}), dir.path(), "bad");
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_exits_cleanly() {
    let o = octmh(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["synth-gen", "pretrain-byol", "train-vision", "train-regression", "fuse", "evaluate", "report", "gradcheck"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

#[test]
fn report_of_the_table_fixture_matches_the_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = octmh(&["report", "--input", fixture("table1.json").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_ok(&o);
    let got = std::fs::read(dir.path().join("report.md")).unwrap();
    assert_eq!(String::from_utf8(got).unwrap(), std::fs::read_to_string(fixture("table1.md")).unwrap());
    let svg = std::fs::read_to_string(dir.path().join("importance.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="bar""#).count(), 5);
}

#[test]
fn gradcheck_writes_one_line_per_case() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_with("gradcheck", &json!({"trials": 2, "out": dir.path()}), dir.path(), "g");
    assert_ok(&o);
    let lines: Vec<Value> = serde_json::from_slice(&std::fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(lines.len(), 9);
    assert!(lines.iter().all(|l| l["passed"] == true));
}

#[test]
fn train_vision_rejects_presets_without_their_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_ok(&run_with("synth-gen", &json!({"out": data, "synth": {"n": 12, "image_size": 24}}), dir.path(), "s"));
    let o = octmh(&[
        "train-vision",
        "--preset",
        "rn-by",
        "--dataset",
        data.join("manifest.csv").to_str().unwrap(),
        "--out",
        dir.path().join("v").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_kind(&o), "config");
}
