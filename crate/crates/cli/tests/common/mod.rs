#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn octmh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octmh")).args(args).output().unwrap()
}

/// Runs a subcommand with a JSON config written next to `out`.
pub fn run_with(cmd: &str, config: &Value, dir: &Path, name: &str) -> Output {
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(config).unwrap()).unwrap();
    octmh(&[cmd, "--config", path.to_str().unwrap()])
}

pub fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// The one-line JSON error on stderr.
pub fn error_kind(o: &Output) -> String {
    let line = String::from_utf8_lossy(&o.stderr);
    let v: Value = serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("{e}: {line}"));
    v["error"]["kind"].as_str().unwrap().to_string()
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Every file under `dir` with its bytes, by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// A small but complete pipeline: synth-gen, train-vision, train-regression,
/// fuse, evaluate and report, all under `root`.
pub fn pipeline(root: &Path, n: usize, size: usize, steps: usize, runs: usize) {
    let data = root.join("data");
    assert_ok(&run_with(
        "synth-gen",
        &json!({"preset": "separable", "seed": 0, "out": data, "synth": {"n": n, "image_size": size + 8}}),
        root,
        "synth",
    ));
    let manifest = data.join("manifest.csv");
    let vision = root.join("vision");
    assert_ok(&run_with(
        "train-vision",
        &json!({
            "preset": "cbr-tiny", "seed": 0, "runs": runs, "dataset": manifest, "out": vision,
            "train": {"batch_size": 8, "max_steps": steps, "eval_every": steps / 2, "input_size": size}
        }),
        root,
        "vision",
    ));
    let regression = root.join("regression");
    assert_ok(&run_with(
        "train-regression",
        &json!({"preset": "regression", "seed": 0, "runs": runs, "dataset": manifest, "out": regression}),
        root,
        "regression",
    ));
    let fusion = root.join("fusion");
    assert_ok(&run_with(
        "fuse",
        &json!({"preset": "fusion", "seed": 0, "runs": runs, "dataset": manifest, "out": fusion, "inputs": [vision]}),
        root,
        "fuse",
    ));
    let eval = root.join("eval");
    assert_ok(&run_with(
        "evaluate",
        &json!({"out": eval, "inputs": [regression, vision, fusion]}),
        root,
        "evaluate",
    ));
    assert_ok(&run_with(
        "report",
        &json!({"out": root.join("report"), "inputs": [eval.join("evaluation.json")]}),
        root,
        "report",
    ));
}
