use std::path::Path;
use std::process::Command as Proc;

use moviekit::checkpoint::Checkpoint;
use moviekit::metrics::read_metrics;
use moviekit::run::{run, Command, ErrorRecord, Invocation};

fn inv(dir: &Path, sets: &[&str]) -> Invocation {
    sets.iter().fold(Invocation::new(dir), |i, s| i.set(*s))
}

/// gen-data through finetune-v at smoke scale.
fn upstream(dir: &Path) {
    run(Command::GenData, &inv(dir, &["train=10", "val=6"])).unwrap();
    run(Command::TrainAutoencoder, &inv(dir, &["train.big_iters=2", "train.tiny_iters=2", "train.batch=2"])).unwrap();
    run(Command::TrainBase, &inv(dir, &["train.iters=3", "train.batch=2"])).unwrap();
    run(Command::DistillGuidance, &inv(dir, &["train.iters=3", "train.batch=2", "probe_items=2"])).unwrap();
    run(Command::FinetuneV, &inv(dir, &["train.iters=3", "train.batch=2"])).unwrap();
}

fn losses(path: &Path) -> Vec<f64> {
    read_metrics(path)
        .unwrap()
        .iter()
        .filter_map(|r| r.get("loss_total").and_then(|v| v.as_f64()))
        .collect()
}

#[test]
fn gen_data_manifests_are_hash_equal() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [a.path(), b.path()] {
        run(Command::GenData, &inv(d, &["train=6", "val=3", "seed=5"])).unwrap();
    }
    run(Command::GenData, &inv(c.path(), &["train=6", "val=3", "seed=6"])).unwrap();
    let manifest = |d: &Path| std::fs::read(d.join("data/train/manifest.jsonl")).unwrap();
    assert_eq!(manifest(a.path()), manifest(b.path()));
    assert_ne!(manifest(a.path()), manifest(c.path()));
    let m = |d: &Path| std::fs::read_to_string(d.join("runs/gen-data/metrics.jsonl")).unwrap();
    assert_eq!(m(a.path()), m(b.path()));
}

#[test]
fn stages_refuse_missing_or_wrong_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let e = run(Command::DistillAdversarial, &Invocation::new(dir.path())).unwrap_err();
    assert_eq!(e.kind(), "checkpoint");
    assert!(e.to_string().contains("distill-guidance"), "{e}");
    let rec: ErrorRecord =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs/distill-adversarial/error.json")).unwrap()).unwrap();
    assert_eq!(rec.error, "checkpoint");

    upstream(dir.path());
    // A base checkpoint where a guidance-distilled one belongs.
    let e = run(Command::FinetuneV, &inv(dir.path(), &["teacher=runs/train-base/base.mvkt"])).unwrap_err();
    assert_eq!(e.kind(), "checkpoint");
    let e = run(Command::TrainBase, &inv(dir.path(), &["train.momentum=0.9"])).unwrap_err();
    assert_eq!(e.kind(), "config");
}

#[test]
fn pipeline_runs_and_replays_from_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    upstream(d);
    for c in ["autoencoder", "base", "guidance", "v"] {
        let run_dir = match c {
            "autoencoder" => "train-autoencoder",
            "base" => "train-base",
            "guidance" => "distill-guidance",
            _ => "finetune-v",
        };
        let p = d.join(format!("runs/{run_dir}/{c}.mvkt"));
        assert!(p.exists(), "{}", p.display());
        assert!(d.join(format!("runs/{run_dir}/config.toml")).exists());
    }
    let guided = Checkpoint::load(d.join("runs/distill-guidance/guidance.mvkt")).unwrap();
    let base = Checkpoint::load(d.join("runs/train-base/base.mvkt")).unwrap();
    assert_eq!(guided.header.parents[0].1, base.digest().unwrap());

    let replay = Invocation {
        config: Some("runs/train-base/config.toml".into()),
        ..inv(d, &["run_dir=runs/replay"])
    };
    run(Command::TrainBase, &replay).unwrap();
    let a = losses(&d.join("runs/train-base/metrics.jsonl"));
    let b = losses(&d.join("runs/replay/metrics.jsonl"));
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);

    run(Command::DistillAdversarial, &inv(d, &["train.iters=2", "train.batch=2", "eval_items=2"])).unwrap();
    run(Command::EditVideo, &inv(d, &["frames=3", "variant=mobile-pruned", "steps=1"])).unwrap();
    let rec = &read_metrics(&d.join("runs/edit-video/metrics.jsonl")).unwrap()[0];
    assert_eq!(rec["nfe"], 9);
    run(Command::Eval, &inv(d, &["probe_items=2", "control_items=2", "gap_items=2", "guidance_steps=1"])).unwrap();
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("runs/eval/eval.json")).unwrap()).unwrap();
    assert!(report["guidance_unit_scale_mse"].as_f64().unwrap().is_finite());
    assert!(report["gap_improvement"].as_f64().is_some());
    run(Command::Plot, &Invocation::new(d)).unwrap();
    let svgs = std::fs::read_dir(d.join("runs/plot"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert!(svgs >= 5);
}

#[test]
fn adversarial_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    upstream(d);
    let common = ["train.batch=2", "eval_items=0"];
    let with = |extra: &[&str]| inv(d, &[&common[..], extra].concat());
    run(Command::DistillAdversarial, &with(&["run_dir=runs/straight", "train.iters=4"])).unwrap();
    run(Command::DistillAdversarial, &with(&["run_dir=runs/split", "train.iters=2"])).unwrap();
    run(Command::DistillAdversarial, &with(&["run_dir=runs/split", "train.iters=4", "resume=true"])).unwrap();
    let a = Checkpoint::load(d.join("runs/straight/adversarial.mvkt")).unwrap();
    let b = Checkpoint::load(d.join("runs/split/adversarial.mvkt")).unwrap();
    assert_eq!(a.tensors, b.tensors);
    assert_eq!(losses(&d.join("runs/straight/metrics.jsonl")), losses(&d.join("runs/split/metrics.jsonl")));
}

#[test]
fn binary_reports_and_fails_machine_readably() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_moviekit");
    let ok = Proc::new(bin)
        .args(["profile-flops", "--workdir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs/profile-flops/report.json")).unwrap()).unwrap();
    let nfe: Vec<u64> = report["reports"].as_array().unwrap().iter().map(|r| r["nfe"].as_u64().unwrap()).collect();
    assert_eq!(nfe, [30, 30, 10, 1]);

    let bad = Proc::new(bin)
        .args(["distill-guidance", "--workdir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!bad.status.success());
    let line = String::from_utf8_lossy(&bad.stderr);
    let rec: ErrorRecord = serde_json::from_str(line.lines().last().unwrap()).unwrap();
    assert_eq!((rec.command.as_str(), rec.error.as_str()), ("distill-guidance", "checkpoint"));

    let cfg = dir.path().join("gd.toml");
    std::fs::write(&cfg, "train = 3\nval = 2\n").unwrap();
    let out = Proc::new(bin)
        .args(["gen-data", "--workdir"])
        .arg(dir.path())
        .arg("--config")
        .arg(&cfg)
        .args(["--set", "val=1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let lines = |s: &str| std::fs::read_to_string(dir.path().join(format!("data/{s}/manifest.jsonl"))).unwrap().lines().count();
    assert_eq!((lines("train"), lines("val")), (3, 1));

    let defaults = Proc::new(bin).args(["train-base", "--print-defaults"]).output().unwrap();
    assert!(String::from_utf8_lossy(&defaults.stdout).contains("[train]"));
}
