//! End-to-end CLI checks with miniature budgets: generate -> pretrain ->
//! train -> eval -> sweep -> infer -> bench, plus config override and
//! exit-code behavior.

use std::path::{Path, PathBuf};
use std::process::Command;

fn tsad() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tsad"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn tsad");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(
        out.status.success(),
        "command failed ({:?}):\nstdout:\n{stdout}\nstderr:\n{stderr}",
        out.status.code()
    );
    stdout + &stderr
}

fn root() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tsad-cli-test-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn data_args(root: &Path) -> Vec<String> {
    vec![
        format!("--data.root={}", root.join("data").display()),
        "--data.detection_train=12".into(),
        "--data.detection_test=6".into(),
        "--data.recognition=12".into(),
        "--data.static=9".into(),
    ]
}

#[test]
fn version_is_machine_readable() {
    let out = run_ok(tsad().arg("--version"));
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["name"], "tsad");
    assert!(v["version"].as_str().is_some());
}

#[test]
fn schema_prints_full_default_config() {
    let out = run_ok(tsad().arg("schema"));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["data"]["detection_train"].is_number());
    assert!(v["train"]["base_lr"].is_number());
    assert!(v["bench"]["batches"].is_array());
}

#[test]
fn unknown_config_key_is_rejected_with_exit_1() {
    let out = tsad().arg("schema").arg("--data.bogus_key=1").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus_key"), "{err}");
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let out = tsad()
        .args(["train", "--out", "/tmp/nowhere-out"])
        .arg("--data.root=/definitely/missing")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "io error -> runtime failure");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing"), "{err}");
}

#[test]
fn full_pipeline_micro_run() {
    let root = root();
    let d = data_args(&root);

    // gen + validation errors name files
    let out = run_ok(tsad().args(["gen", "--preset", "all", "--seed", "3"]).args(&d));
    assert!(out.contains("wrote"));
    assert!(root.join("data/detection/train/manifest.json").exists());
    assert!(root.join("data/detection/test/data.bin").exists());

    // pretrain a small flow variant
    let flow_dir = root.join("runs/flow");
    run_ok(
        tsad()
            .args(["pretrain-flow", "--variant", "sd", "--out"])
            .arg(&flow_dir)
            .args(&d)
            .args(["--train.flow_steps=4", "--train.flow_batch=2", "--train.eval_every=0"]),
    );
    assert!(flow_dir.join("flow-epe.ckpt").exists());
    assert!(flow_dir.join("curves.csv").exists());

    // static pretrain
    let static_dir = root.join("runs/static");
    run_ok(
        tsad()
            .args(["pretrain-static", "--out"])
            .arg(&static_dir)
            .args(&d)
            .args(["--train.static_steps=3", "--train.static_batch=2"]),
    );

    // recognition pretrain from both
    let recog_dir = root.join("runs/recog");
    run_ok(
        tsad()
            .args(["pretrain-recog", "--out"])
            .arg(&recog_dir)
            .arg("--init-static")
            .arg(static_dir.join("static.ckpt"))
            .arg("--init-flow")
            .arg(flow_dir.join("flow-epe.ckpt"))
            .args(&d)
            .args([
                "--train.recog_steps=3",
                "--train.recog_batch=2",
                "--flow.variant=sd",
            ]),
    );

    // detection training from the recognition checkpoint
    let det_dir = root.join("runs/detect");
    run_ok(
        tsad()
            .args(["train", "--out"])
            .arg(&det_dir)
            .arg("--init")
            .arg(recog_dir.join("recognition.ckpt"))
            .args(&d)
            .args([
                "--train.steps=4",
                "--train.batch=2",
                "--train.eval_every=2",
                "--flow.variant=sd",
            ]),
    );
    let ckpt = det_dir.join("detection.ckpt");
    assert!(ckpt.exists());
    let curves = std::fs::read_to_string(det_dir.join("curves.csv")).unwrap();
    assert!(curves.starts_with("step,split,metric,value"));
    assert!(curves.contains("holdout"));

    // eval emits report + curves
    let eval_dir = root.join("runs/eval");
    let out = run_ok(
        tsad().args(["eval", "--ckpt"]).arg(&ckpt).args(["--out"]).arg(&eval_dir).args(&d),
    );
    assert!(out.contains("f-mAP@0.50"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["per_alpha"].as_array().unwrap().len(), 3);
    assert!(report["model_provenance"]
        .as_array()
        .unwrap()
        .iter()
        .any(|s| s == "detection"));

    // sweep: monotone rows
    let sweep_dir = root.join("runs/sweep");
    run_ok(tsad().args(["sweep", "--ckpt"]).arg(&ckpt).args(["--out"]).arg(&sweep_dir).args(&d));
    let sweep = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 20); // header + 19 alphas

    // infer: one annotated png per frame pair + detections json
    let infer_dir = root.join("runs/infer");
    run_ok(
        tsad()
            .args(["infer", "--ckpt"])
            .arg(&ckpt)
            .args(["--sample", "0", "--out"])
            .arg(&infer_dir)
            .args(&d),
    );
    let dets: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(infer_dir.join("detections.json")).unwrap())
            .unwrap();
    let frames = dets.as_array().unwrap();
    assert_eq!(frames.len(), 15);
    for f in frames {
        assert!(f["detections"].as_array().unwrap().len() <= 1, "top1 violated");
    }
    assert!(infer_dir.join("frame_000.png").exists());
    assert!(infer_dir.join("frame_014.png").exists());

    // bench (tiny): table emitted with one variant x one batch
    let bench_dir = root.join("runs/bench");
    let out = run_ok(
        tsad()
            .args(["bench", "--mode", "compare", "--variants", "sd", "--frames", "6"])
            .args(["--batch", "2", "--out"])
            .arg(&bench_dir)
            .args(&d)
            .args(["--bench.warmup=2", "--bench.repeats=1"]),
    );
    assert!(out.contains("speedup"));
    assert!(bench_dir.join("bench.csv").exists());
    assert!(bench_dir.join("modes.json").exists());

    // loading a truncated checkpoint is a checksum error (exit 1)
    let bytes = std::fs::read(&ckpt).unwrap();
    let broken = root.join("broken.ckpt");
    std::fs::write(&broken, &bytes[..bytes.len() - 5]).unwrap();
    let out = tsad()
        .args(["eval", "--ckpt"])
        .arg(&broken)
        .args(["--out"])
        .arg(root.join("runs/broken"))
        .args(&d)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}
