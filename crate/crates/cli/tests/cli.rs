use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tta_cli::manifest::{FileRecord, RunManifest, RUN_MANIFEST};

fn tta(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tta"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_config(checkpoint: Option<&str>) -> Value {
    json!({
        "data": {
            "checkpoint": checkpoint,
            "grid": 16,
            "phantom": {
                "raw_dims": [20, 20, 20],
                "tumor_radius": [3.0, 5.0],
                "source_cases": 2,
                "target_cases": 2
            }
        },
        "net": {"base_channels": 4, "depth": 1},
        "pretrain": {"epochs": 2},
        "adapt": {"epochs": 1}
    })
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

/// Every file under `dir` except the run manifest, keyed by relative path.
fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != RUN_MANIFEST {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn phantom_output_depends_only_on_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small_config(None));
    let cfg = cfg.to_str().unwrap();
    for (out, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        ok(tta(&["phantom", "--config", cfg, "--seed", seed, "--out", out], tmp.path()));
    }
    let (a, b, c) = (files(&tmp.path().join("a")), files(&tmp.path().join("b")), files(&tmp.path().join("c")));
    assert_eq!(a.len(), 1 + 4 * 2);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn unknown_keys_exit_2_and_are_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", &json!({"data": {"gird": 3}, "bogus": 1}));
    let out = tta(&["eval", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "unknown_config_keys");
    assert_eq!(err["keys"], json!(["bogus", "data.gird"]));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small_config(None));
    let out = tta(&["adapt", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "runtime");
}

#[test]
fn gradcheck_reports_every_component() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tta(&["gradcheck", "--scope", "losses", "--instances", "2"], tmp.path()));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() > 2);
    assert!(!text.contains("FAIL"));
}

fn check_manifest(dir: &Path, command: &str) {
    let m: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join(RUN_MANIFEST)).unwrap()).unwrap();
    assert_eq!(m.command, command);
    assert_eq!(m.seed, 42);
    assert_eq!(m.config_hash.len(), 64);
    assert!(!m.outputs.is_empty());
    for r in m.inputs.iter().chain(&m.outputs) {
        let p = Path::new(&r.path);
        let p = if p.is_absolute() { p.to_path_buf() } else { dir.parent().unwrap().join(p) };
        assert_eq!(FileRecord::of(&p).unwrap().sha256, r.sha256, "{}", r.path);
    }
}

#[test]
fn pipeline_is_reproducible_and_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let plain = write_config(dir, "plain.json", &small_config(None));
    ok(tta(&["pretrain", "--config", plain.to_str().unwrap(), "--out", "pre"], dir));
    check_manifest(&dir.join("pre"), "pretrain");

    let cfg = write_config(dir, "adapt.json", &small_config(Some("pre/source_model.json")));
    let cfg = cfg.to_str().unwrap();
    ok(tta(&["adapt", "--config", cfg, "--out", "a1"], dir));
    ok(tta(&["adapt", "--config", cfg, "--out", "a2"], dir));
    check_manifest(&dir.join("a1"), "adapt");
    let metrics = |d: &str| fs::read(dir.join(d).join("metrics.csv")).unwrap();
    assert_eq!(metrics("a1"), metrics("a2"));
    assert_eq!(
        fs::read(dir.join("a1/model_ema.bin")).unwrap(),
        fs::read(dir.join("a2/model_ema.bin")).unwrap()
    );
    let report = fs::read_to_string(dir.join("a1/report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 2);

    let ema = write_config(dir, "ema.json", &small_config(Some("a1/model_ema.json")));
    ok(tta(&["eval", "--config", ema.to_str().unwrap(), "--out", "e"], dir));
    assert_eq!(metrics("e"), metrics("a1"));
    ok(tta(&["eval", "--config", ema.to_str().unwrap(), "--out", "e2"], dir));
    assert_eq!(metrics("e"), metrics("e2"));
    check_manifest(&dir.join("e"), "eval");
}
