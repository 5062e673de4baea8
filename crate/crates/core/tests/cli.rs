use std::fs;
use std::path::Path;
use std::process::Command;

use dcac_core::cli::{run, AblationReport, RunManifest, Settings, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

const TINY: &[&str] = &[
    "--epochs",
    "1",
    "--steps-per-epoch",
    "2",
    "--batch",
    "2",
    "--patch",
    "32",
    "--blocks",
    "3",
    "--base-channels",
    "4",
    "--val-cases",
    "2",
];

fn dcac(args: &[&str]) -> i32 {
    run(std::iter::once("dcac").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) {
    assert_eq!(dcac(&["synth", "--out", s(dir), "--domains", "3", "--cases", "5", "--size", "32"]), EXIT_OK);
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(dcac(&["--help"]), EXIT_OK);
    assert_eq!(dcac(&["--version"]), EXIT_OK);
    assert_eq!(dcac(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(dcac(&["train", "--holdout", "0"]), EXIT_USAGE);
    assert_eq!(dcac(&["train", "--data", "x", "--out", "y", "--holdout", "zero"]), EXIT_USAGE);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_dcac");
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(EXIT_OK));
    assert_eq!(Command::new(bin).arg("nope").output().unwrap().status.code(), Some(EXIT_USAGE));
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(bin)
        .args(["synth", "--out", s(&dir.path().join("d")), "--domains", "3", "--cases", "2", "--size", "16"])
        .env("DCAC_DEVICE", "gpu")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cpu"));
}

#[test]
fn synth_is_deterministic_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    synth(&a);
    synth(&b);
    let first = fs::read_dir(a.join("domain_1/images")).unwrap().next().unwrap().unwrap().file_name();
    let rel = Path::new("domain_1/images").join(first);
    assert_eq!(fs::read(a.join(&rel)).unwrap(), fs::read(b.join(&rel)).unwrap());
    assert_eq!(dcac(&["synth", "--out", s(&a), "--domains", "3", "--cases", "5", "--size", "32"]), EXIT_RUNTIME);
    assert_eq!(dcac(&["synth", "--out", s(&a), "--cases", "5", "--size", "32", "--force"]), EXIT_OK);
    assert_eq!(dcac(&["synth", "--out", s(&dir.path().join("c")), "--domains", "2"]), EXIT_RUNTIME);
    let m: RunManifest = serde_json::from_slice(&fs::read(a.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(m.command, "synth");
    assert_eq!(m.seed, Some(7));
    assert_eq!(m.device, "cpu");
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    synth(&data);
    let mut args = vec!["train", "--data", s(&data), "--holdout", "1", "--out", s(&run_dir)];
    args.extend_from_slice(TINY);
    assert_eq!(dcac(&args), EXIT_OK);
    for f in ["model.ckpt", "train_log.jsonl", "run_manifest.json", "config.json", "cell.json"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    assert_eq!(dcac(&args), EXIT_RUNTIME, "refuses to overwrite");

    let ev = dir.path().join("eval");
    let ckpt = run_dir.join("model.ckpt");
    let code = dcac(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&ev), "--plot", "--export-features"]);
    assert_eq!(code, EXIT_OK);
    for f in [
        "case_results.jsonl",
        "report.json",
        "summary.txt",
        "confusion.json",
        "ranking.json",
        "features.jsonl",
        "loss_curve.png",
        "confusion.png",
        "run_manifest.json",
    ] {
        assert!(ev.join(f).exists(), "missing {f}");
    }
    let cases = fs::read_to_string(ev.join("case_results.jsonl")).unwrap();
    assert_eq!(cases.lines().count(), 5);
    assert!(cases.lines().all(|l| l.contains("\"domain_id\":1")));

    let other = dir.path().join("other");
    assert_eq!(dcac(&["synth", "--out", s(&other), "--domains", "3", "--cases", "5", "--size", "32", "--classes", "3"]), EXIT_OK);
    let bad = dcac(&["eval", "--data", s(&other), "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("bad"))]);
    assert_eq!(bad, EXIT_RUNTIME, "class-count mismatch");

    let config = run_dir.join("run_manifest.json");
    let again = dir.path().join("again");
    let code = dcac(&["train", "--data", s(&data), "--holdout", "1", "--out", s(&again), "--config", s(&config), "--epochs", "2"]);
    assert_eq!(code, EXIT_OK);
    let settings = Settings::from_file(&again.join("config.json")).unwrap();
    assert_eq!(settings.train.epochs, 2);
    assert_eq!(settings.train.steps_per_epoch, 2);
    assert_eq!(settings.backbone.base_channels, 4);
}

#[test]
fn ablate_resumes_finished_cells() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("ablate");
    synth(&data);
    let mut args = vec!["ablate", "--data", s(&data), "--out", s(&out), "--variants", "deepall,dcac", "--holdouts", "0"];
    args.extend_from_slice(TINY);
    assert_eq!(dcac(&args), EXIT_OK);
    let report: AblationReport = serde_json::from_slice(&fs::read(out.join("ablation.json")).unwrap()).unwrap();
    let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["DeepAll", "DC(p)AC", "DCAC"]);
    assert!(report.rows.iter().all(|r| r.average.is_some()));
    assert!(report.rows[0].p_vs_dcac.is_some());

    let ckpt = out.join("deepall/holdout_0/model.ckpt");
    let before = fs::metadata(&ckpt).unwrap().modified().unwrap();
    assert_eq!(dcac(&args), EXIT_OK);
    assert_eq!(fs::metadata(&ckpt).unwrap().modified().unwrap(), before);
}

#[test]
fn bad_config_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"epochs": 1}, "unknown_key": 3}"#).unwrap();
    let code = dcac(&["train", "--data", s(dir.path()), "--holdout", "0", "--out", s(&dir.path().join("o")), "--config", s(&cfg)]);
    assert_eq!(code, EXIT_RUNTIME);
}
