use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CONFIG: &str = "\
[network]
feature_widths = [8]
edge_channels = 4

[training]
epochs = 2
batch_size = 2
learning_rate = 0.01
seed = 5
";

const TINY_SPEC: &str = "\
count = 3
points = 40
seed = 300
";

fn ncreg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncreg"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) {
    let out = ncreg(args, dir);
    assert!(
        out.status.success(),
        "ncreg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn fail(args: &[&str], dir: &Path) -> String {
    let out = ncreg(args, dir);
    assert!(!out.status.success(), "ncreg {args:?} unexpectedly succeeded");
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic should be one line: {err}");
    err
}

/// Runs every command once in `dir` and returns the produced files.
fn run_all(dir: &Path) -> Vec<PathBuf> {
    std::fs::write(dir.join("cfg.toml"), TINY_CONFIG).unwrap();
    std::fs::write(dir.join("spec.toml"), TINY_SPEC).unwrap();
    ok(&["gen", "--spec", "spec.toml", "--out-manifest", "m.jsonl"], dir);
    ok(
        &[
            "train", "--manifest", "m.jsonl", "--config", "cfg.toml", "--out-weights", "w.json",
            "--holdout", "m.jsonl", "--history", "h.csv",
        ],
        dir,
    );
    ok(&["eval", "--manifest", "m.jsonl", "--weights", "w.json", "--config", "cfg.toml", "--out", "e.csv"], dir);
    ok(
        &[
            "bench", "--manifest", "m.jsonl", "--weights", "w.json", "--baseline", "icp", "--config", "cfg.toml",
            "--out", "b.csv",
        ],
        dir,
    );
    let pair = ncreg::manifest::read_manifest(&dir.join("m.jsonl")).unwrap()[0].generate().unwrap();
    ncreg::write_cloud(&pair.source, &dir.join("src.xyz"), ncreg::CloudFormat::Xyz).unwrap();
    ncreg::write_cloud(&pair.target, &dir.join("dst.ply"), ncreg::CloudFormat::PlyAscii).unwrap();
    ok(
        &["register", "src.xyz", "dst.ply", "--weights", "w.json", "--config", "cfg.toml", "--out", "r.json"],
        dir,
    );
    ["m.jsonl", "w.json", "w.json.meta", "h.csv", "e.csv", "b.csv", "r.json"]
        .iter()
        .map(|f| dir.join(f))
        .collect()
}

#[test]
fn every_command_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fa = run_all(a.path());
    let fb = run_all(b.path());
    for (x, y) in fa.iter().zip(&fb) {
        let (bx, by) = (std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        assert!(!bx.is_empty(), "{} is empty", x.display());
        assert_eq!(bx, by, "{} differs between runs", x.file_name().unwrap().to_string_lossy());
    }
}

#[test]
fn outputs_have_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    run_all(dir.path());
    let d = dir.path();
    let eval = std::fs::read_to_string(d.join("e.csv")).unwrap();
    assert_eq!(eval.lines().count(), 1 + 3 + 1);
    assert!(eval.lines().last().unwrap().starts_with("mean,"));
    let bench = std::fs::read_to_string(d.join("b.csv")).unwrap();
    assert_eq!(bench.lines().next().unwrap(), "method,MAE(R),MAE(t),MIE(R),MIE(t)");
    assert_eq!(bench.lines().count(), 3);
    assert_eq!(std::fs::read_to_string(d.join("h.csv")).unwrap().lines().count(), 3);
    let meta = std::fs::read_to_string(d.join("w.json.meta")).unwrap();
    assert!(meta.contains("epoch = 2") && meta.contains("config_hash = \"") && meta.contains("seed = 5"));

    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    let t = report["transform"].as_array().unwrap();
    assert_eq!(t.len(), 4);
    assert_eq!(t[3], serde_json::json!([0.0, 0.0, 0.0, 1.0]));
    let iters = report["iterations"].as_array().unwrap();
    assert_eq!(iters.len(), 3);
    assert_eq!(iters[0]["inlier_weights"].as_array().unwrap().len(), report["source_points"].as_u64().unwrap() as usize);
    assert!(iters[2]["losses"]["total"].is_number());
    assert_eq!(report["seed"], 5);
}

#[test]
fn missing_weights_fail_explicitly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.toml"), TINY_SPEC).unwrap();
    ok(&["gen", "--spec", "spec.toml", "--out-manifest", "m.jsonl"], d);
    let err = fail(&["eval", "--manifest", "m.jsonl", "--weights", "nope.json", "--out", "e.csv"], d);
    assert!(err.contains("untrained weights"), "{err}");
    assert!(!d.join("e.csv").exists());
    std::fs::write(d.join("a.xyz"), "0 0 0\n1 0 0\n").unwrap();
    let err = fail(&["register", "a.xyz", "a.xyz", "--weights", "nope.json", "--out", "r.json"], d);
    assert!(err.contains("untrained weights"), "{err}");
}

#[test]
fn bad_inputs_give_one_line_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.toml"), "[registration]\nalfa = 1.0\n").unwrap();
    std::fs::write(d.join("spec.toml"), TINY_SPEC).unwrap();
    let err = fail(&["gen", "--spec", "spec.toml", "--out-manifest", "m.jsonl", "--config", "bad.toml"], d);
    assert!(err.contains("invalid configuration"), "{err}");
    let err = fail(&["gen", "--spec", "absent.toml", "--out-manifest", "m.jsonl"], d);
    assert!(err.contains("absent.toml"), "{err}");
    std::fs::write(d.join("m.jsonl"), "{\"id\": 0}\n").unwrap();
    let err = fail(&["train", "--manifest", "m.jsonl", "--out-weights", "w.json"], d);
    assert!(err.contains("m.jsonl:1:"), "{err}");
    assert!(!d.join("w.json").exists());
}

#[test]
fn weights_for_another_architecture_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let params = ncreg_core::init_params(0, &ncreg_core::NetConfig::default()).unwrap();
    ncreg::save_weights(&params, &d.join("w.json")).unwrap();
    std::fs::write(d.join("cfg.toml"), TINY_CONFIG).unwrap();
    std::fs::write(d.join("spec.toml"), TINY_SPEC).unwrap();
    ok(&["gen", "--spec", "spec.toml", "--out-manifest", "m.jsonl"], d);
    let err = fail(&["eval", "--manifest", "m.jsonl", "--weights", "w.json", "--config", "cfg.toml", "--out", "e.csv"], d);
    assert!(err.contains("different network"), "{err}");
}
