use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lldm_core::pipeline::PipelineConfig;
use lldm_core::segment::SegTrainConfig;
use serde_json::{json, Value};

fn lldm(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lldm"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn lldm")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let seg = SegTrainConfig {
        base_width: 4,
        max_steps: 2,
        eval_every: 1,
        batch_size: 2,
        ..SegTrainConfig::desk()
    };
    let cfg = json!({ "pipeline": PipelineConfig::tiny(), "segment": seg });
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_n_entries_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(&lldm(out, &["gen-data", "--n", "16", "--seed", "7"]));
    }
    let m = read_json(&a.join("data/manifest.json"));
    assert_eq!(m["entries"].as_array().unwrap().len(), 16);
    assert_eq!(
        fs::read(a.join("data/manifest.json")).unwrap(),
        fs::read(b.join("data/manifest.json")).unwrap()
    );
    let first = m["entries"][0]["volume"].as_str().unwrap();
    assert_eq!(fs::read(a.join("data").join(first)).unwrap(), fs::read(b.join("data").join(first)).unwrap());
    let echo = read_json(&a.join("data/gen-data.config.json"));
    assert_eq!(echo["config"]["pipeline"]["seed"], 7);
}

#[test]
fn usage_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(lldm(tmp.path(), &["gen-data"]).status.code(), Some(2));
    assert_eq!(lldm(tmp.path(), &["train", "--stage", "nope"]).status.code(), Some(2));
    assert_eq!(lldm(tmp.path(), &["eval", "a", "b"]).status.code(), Some(2));
    let o = lldm(tmp.path(), &["experiment", "--tasks", "spleen_only"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("spleen_only"));
}

#[test]
fn flags_override_config_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    let mut p = PipelineConfig::desk();
    p.seed = 1;
    fs::write(&cfg, serde_json::to_string(&json!({ "seed": 5, "pipeline": p })).unwrap()).unwrap();
    let out = tmp.path().join("o");
    ok(&lldm(&out, &["--config", cfg.to_str().unwrap(), "gen-data", "--n", "3"]));
    assert_eq!(read_json(&out.join("data/manifest.json"))["seed"], 5);
    ok(&lldm(&out, &["--config", cfg.to_str().unwrap(), "--seed", "9", "gen-data", "--n", "3"]));
    assert_eq!(read_json(&out.join("data/manifest.json"))["seed"], 9);
}

#[test]
fn runtime_failures_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lldm(tmp.path(), &["synthesize", "--n", "2"]);
    assert_eq!(o.status.code(), Some(1));
    let o = lldm(tmp.path(), &["eval", "--fid", "missing_a", "missing_b"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn staged_training_synthesis_eval_and_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let c = cfg.to_str().unwrap();
    let out = tmp.path().join("run");

    ok(&lldm(&out, &["--config", c, "gen-data", "--n", "6"]));
    ok(&lldm(&out, &["--config", c, "train", "--stage", "vae-vol"]));
    ok(&lldm(&out, &["--config", c, "train", "--stage", "vae-label"]));
    let o = lldm(&out, &["--config", c, "train", "--stage", "controlnet"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ldm-label"));

    let s = ok(&lldm(&out, &["--config", c, "train", "--stage", "all"]));
    assert!(s.contains("vae-vol: reused"), "{s}");
    assert!(s.contains("controlnet:"), "{s}");
    for stage in ["vae-vol", "vae-label", "ldm-label", "controlnet"] {
        let log = fs::read_to_string(out.join("checkpoints").join(stage).join("log.csv")).unwrap();
        assert!(log.starts_with("step,loss"), "{stage}: {log}");
    }
    assert!(out.join("checkpoints/train.config.json").is_file());

    ok(&lldm(&out, &["--config", c, "synthesize", "--n", "2", "--seed", "1", "--montage"]));
    let manifest = fs::read(out.join("synth/manifest.json")).unwrap();
    let m: Value = serde_json::from_slice(&manifest).unwrap();
    assert_eq!(m["entries"].as_array().unwrap().len(), 2);
    let vol = out.join("synth").join(m["entries"][1]["volume"].as_str().unwrap());
    let first = fs::read(&vol).unwrap();
    for v in ["axial", "sagittal", "coronal"] {
        assert!(out.join(format!("synth/montage_{v}.png")).is_file());
    }
    ok(&lldm(&out, &["--config", c, "synthesize", "--n", "2", "--seed", "1"]));
    assert_eq!(fs::read(out.join("synth/manifest.json")).unwrap(), manifest);
    assert_eq!(fs::read(&vol).unwrap(), first);

    let data = out.join("data");
    let synth = out.join("synth");
    let d = data.to_str().unwrap();
    ok(&lldm(&out, &["--config", c, "eval", "--fid", d, d]));
    let fid = read_json(&out.join("reports/fid.json"));
    assert!(fid["fid_3d"].as_f64().unwrap().abs() < 1e-6);
    let s = ok(&lldm(&out, &["--config", c, "eval", "--per-view", synth.to_str().unwrap(), d]));
    assert!(s.contains("Ax. FID ↓"), "{s}");
    let pv = read_json(&out.join("reports/fid_per_view.json"))["per_view"].clone();
    let parts: Vec<f64> = ["axial", "sagittal", "coronal"].iter().map(|k| pv[k].as_f64().unwrap()).collect();
    assert!((pv["average"].as_f64().unwrap() - parts.iter().sum::<f64>() / 3.0).abs() < 1e-9);

    let s = ok(&lldm(
        &out,
        &["--config", c, "experiment", "--tasks", "hcc_only", "--arch", "unet", "--seeds", "3"],
    ));
    assert!(s.contains("R + S") && s.contains("Improvement"), "{s}");
    let rep = read_json(&out.join("reports/experiment.json"));
    assert_eq!(rep["rows"].as_array().unwrap().len(), 1);
    assert_eq!(rep["seeds"].as_array().unwrap().len(), 3);
    assert!(out.join("reports/experiment.txt").is_file());
}
