mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eon_core::cli::RunConfig;
use eon_core::detector::{DetectorConfig, Variant};
use eon_core::scenegen::SceneGenConfig;

fn eon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eon"))
        .args(args)
        .env("EON_NUM_WORKERS", "1")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config() -> RunConfig {
    common::small_run_config()
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, cfg: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let o = eon(&["gen", "--config", s(cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &small_config());
    let a = gen(dir.path(), &cfg, "a");
    let b = gen(dir.path(), &cfg, "b");
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.iter().any(|(p, _)| p.ends_with("manifest.json")));
    assert_eq!(fa, fb);
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"detector": {"learning_rat": 0.1}}"#).unwrap();
    let o = eon(&["gen", "--config", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&eon(&["frobnicate"])), 2);
    assert_eq!(code(&eon(&["gen", "--bogus"])), 2);
    assert_eq!(code(&eon(&["verify", "--random-params", "--checkpoint", "x"])), 2);
    assert_eq!(code(&eon(&["--help"])), 0);
}

#[test]
fn non_empty_out_dir_requires_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &small_config());
    let out = dir.path().join("data");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("keep.txt"), "x").unwrap();
    let o = eon(&["gen", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"));
    let o = eon(&["gen", "--config", s(&cfg), "--out", s(&out), "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("keep.txt").is_file());
}

#[test]
fn missing_dataset_manifest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", &small_config());
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let o = eon(&["train", "--config", s(&cfg), "--data", s(&empty), "--out", s(&dir.path().join("t"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("manifest"));
}

#[test]
fn train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = small_config();
    run.detector.epochs = 0;
    let cfg = write_config(dir.path(), "run.json", &run);
    let data = gen(dir.path(), &cfg, "data");
    let train_dir = dir.path().join("train");
    let o = eon(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&train_dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = train_dir.join("checkpoint");
    assert!(ckpt.join("manifest.json").is_file());

    let eval = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["eval", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&out)];
        args.extend_from_slice(extra);
        let o = eon(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
        (out, report)
    };
    let (a, ra) = eval("eval_a", &[]);
    let (b, _) = eval("eval_b", &[]);
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    assert_eq!(fs::read(a.join("report.csv")).unwrap(), fs::read(b.join("report.csv")).unwrap());
    assert!(a.join("timing.json").is_file());
    assert_eq!(ra["tables"].as_array().unwrap().len(), 2);

    let (_, single) = eval("eval_single", &["--thresholds", "0.25"]);
    let tables = single["tables"].as_array().unwrap();
    assert_eq!(tables.len(), 1);
    assert_eq!(tables[0]["threshold"], 0.25);

    // more epochs through resume
    let mut more = run.clone();
    more.detector.epochs = 1;
    let cfg2 = write_config(dir.path(), "run2.json", &more);
    let o = eon(&["train", "--config", s(&cfg2), "--data", s(&data), "--out", s(&train_dir), "--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(ckpt.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["epochs_completed"], 1);
}

#[test]
fn group_order_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_config();
    let cfg = write_config(dir.path(), "run.json", &run);
    let data = gen(dir.path(), &cfg, "data");
    let mut other = run.clone();
    other.detector.group_order = 8;
    let cfg8 = write_config(dir.path(), "run8.json", &other);
    let o = eon(&["train", "--config", s(&cfg8), "--data", s(&data), "--out", s(&dir.path().join("t"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("group"), "{}", stderr(&o));
}

#[test]
fn verify_random_params_on_isolated_scene() {
    let dir = tempfile::tempdir().unwrap();
    let detector = DetectorConfig {
        use_gt_orientation: true,
        use_gt_segmentation: true,
        ..DetectorConfig::default()
    };
    let mut run = RunConfig {
        scene: SceneGenConfig::isolated(4, detector.influence_radius() + 0.5),
        detector,
        ..RunConfig::default()
    };
    let cfg = write_config(dir.path(), "oracle.json", &run);
    let out = dir.path().join("verify");
    let o = eon(&["verify", "--config", s(&cfg), "--random-params", "--out", s(&out)]);
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(code(&o), 0, "{stdout}{}", stderr(&o));
    assert!(stdout.contains("bounds hold"), "{stdout}");
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("verify.json")).unwrap()).unwrap();
    assert_eq!(v["passed"], true);

    run.detector.variant = Variant::Ion;
    let cfg = write_config(dir.path(), "ion.json", &run);
    let o = eon(&["verify", "--config", s(&cfg), "--random-params"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("not asserted"));
}

#[test]
fn verify_needs_parameters() {
    assert_eq!(code(&eon(&["verify"])), 2);
}

#[test]
fn small_ablation_writes_one_row_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = small_config();
    run.ablate.variants = vec![Variant::Baseline, Variant::Eon];
    run.ablate.oracle = false;
    let cfg = write_config(dir.path(), "run.json", &run);
    let out = dir.path().join("ablate");
    let o = eon(&["ablate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,N,objaug,mAP@0.25,mAP@0.5,params,median_forward_ms,status");
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(lines[1].starts_with("baseline,1,"));
    assert!(lines[2].starts_with("eon,4,"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",ok")));
}
