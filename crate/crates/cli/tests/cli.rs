use std::path::Path;
use std::process::{Command, Output};

use mocorr_core::metrics::REPORT_COLUMNS;
use mocorr_core::motion::{save_trajectories, MotionTrajectory, Ordering};
use mocorr_core::volume::load_volume;
use serde_json::Value;

fn mocorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mocorr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("MOCORR_OUT")
        .output()
        .expect("spawn mocorr")
}

fn ok(args: &[&str]) -> String {
    let out = mocorr(args);
    assert!(
        out.status.success(),
        "mocorr {} failed ({:?}): {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

/// Small dataset and network settings shared by the training tests.
const TINY: [&str; 8] = [
    "--set",
    "net.input_size=[32,32]",
    "--set",
    "data.presets=[\"mild\"]",
    "--set",
    "batch_size=8",
    "--set",
    "epochs=2",
];

fn tiny_phantoms(dir: &Path, count: &str) {
    ok(&["phantom", "--count", count, "--dims", "32,32,16", "--seed", "3", "--out", s(dir)]);
}

#[test]
fn simulate_with_zero_trajectories_is_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["phantom", "--dims", "32,32,16", "--out", s(&data)]);
    let clean_path = data.join("subject_000.mvol");
    let clean = load_volume(&clean_path).unwrap();

    let severe = tmp.path().join("severe");
    ok(&["simulate", "--in", s(&clean_path), "--preset", "severe", "--seed", "1", "--out", s(&severe)]);
    let corrupted = load_volume(severe.join("corrupted.mvol")).unwrap();
    assert_ne!(corrupted.data(), clean.data());
    assert!(severe.join("trajectories.mtraj").exists());

    let zeros: Vec<_> = (0..16).map(|_| MotionTrajectory::zeros(Ordering::Lines2d, 32)).collect();
    let traj = tmp.path().join("zeros.mtraj");
    save_trajectories(&zeros, &traj).unwrap();
    let still = tmp.path().join("still");
    ok(&["simulate", "--in", s(&clean_path), "--traj-in", s(&traj), "--out", s(&still)]);
    let out = load_volume(still.join("corrupted.mvol")).unwrap();
    let err = out.data().iter().zip(clean.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(err < 1e-4, "max |err| {err}");
}

#[test]
fn recorded_trajectories_replay_the_same_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["phantom", "--dims", "32,32,16", "--out", s(&data)]);
    let clean = data.join("subject_000.mvol");
    let a = tmp.path().join("a");
    ok(&["simulate", "--in", s(&clean), "--preset", "moderate", "--seed", "9", "--out", s(&a)]);
    let b = tmp.path().join("b");
    ok(&["simulate", "--in", s(&clean), "--traj-in", s(&a.join("trajectories.mtraj")), "--out", s(&b)]);
    assert_eq!(
        std::fs::read(a.join("corrupted.mvol")).unwrap(),
        std::fs::read(b.join("corrupted.mvol")).unwrap()
    );
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(mocorr(&["phantom", "--dims", "8,8", "--out", s(&out)]).status.code(), Some(1));
    assert_eq!(mocorr(&["phantom", "--dims", "24,32,16", "--out", s(&out)]).status.code(), Some(1));
    assert_eq!(mocorr(&["no-such-command"]).status.code(), Some(1));

    let missing = tmp.path().join("missing.mvol");
    let r = mocorr(&["simulate", "--in", s(&missing), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("missing.mvol"));

    let garbage = tmp.path().join("garbage.mvol");
    std::fs::write(&garbage, b"not a volume").unwrap();
    let r = mocorr(&["simulate", "--in", s(&garbage), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));

    let data = tmp.path().join("data");
    tiny_phantoms(&data, "2");
    let r = mocorr(&["train", "--profile", "toy", "--data", s(&data), "--set", "no_such_key=1", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    let r = mocorr(&["train", "--profile", "toy", "--data", s(&data), "--set", "epochs=0", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn replay_regenerates_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    ok(&["phantom", "--count", "2", "--dims", "32,32,16", "--seed", "5", "--out", s(&a)]);
    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["command"], "phantom");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);

    let b = tmp.path().join("b");
    ok(&["replay", "--manifest", s(&a.join("manifest.json")), "--out", s(&b)]);
    for f in ["subject_000.mvol", "subject_001.mvol"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_evaluate_resume_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_phantoms(&data, "5");
    let run = tmp.path().join("run");
    let mut args = vec!["--deterministic", "train", "--profile", "toy", "--data", s(&data), "--out", s(&run)];
    args.extend(TINY);
    ok(&args);

    let resolved = json(&run.join("config.resolved.json"));
    assert_eq!(resolved["epochs"], 2);
    assert_eq!(resolved["net"]["input_size"], serde_json::json!([32, 32]));
    assert_eq!(resolved["batch_size"], 8);
    let curves = std::fs::read_to_string(run.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 3);
    let split = json(&run.join("split.json"));
    assert_eq!(split["test_subjects"].as_array().unwrap().len(), 1);

    let eval = tmp.path().join("eval");
    ok(&[
        "evaluate",
        "--checkpoint",
        s(&run.join("best.mckpt")),
        "--data",
        s(&data),
        "--diff-maps",
        "--out",
        s(&eval),
    ]);
    let report = std::fs::read_to_string(eval.join("report.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), REPORT_COLUMNS.join(","));
    let test_id = split["test_subjects"][0].as_str().unwrap();
    assert_eq!(report.lines().count(), 1 + 16);
    assert!(report.lines().skip(1).all(|l| l.starts_with(&format!("{test_id},"))));
    let diff = load_volume(eval.join(format!("diff_{test_id}_mild.mvol"))).unwrap();
    assert_eq!(diff.dims(), [32, 32, 16]);
    assert!(diff.data().iter().any(|&v| v < 0.0), "signed differences expected");

    let resumed = tmp.path().join("resumed");
    let last = run.join("last.mckpt");
    let mut args = vec![
        "train",
        "--profile",
        "toy",
        "--data",
        s(&data),
        "--resume",
        s(&last),
        "--out",
        s(&resumed),
    ];
    args.extend(TINY);
    args.extend(["--set", "epochs=3"]);
    ok(&args);
    let curves = std::fs::read_to_string(resumed.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 4);
    assert!(curves.starts_with(&std::fs::read_to_string(run.join("curves.csv")).unwrap()));

    let replayed = tmp.path().join("replayed");
    ok(&["replay", "--manifest", s(&run.join("manifest.json")), "--out", s(&replayed)]);
    for f in ["best.mckpt", "last.mckpt", "batch_log.jsonl"] {
        assert_eq!(std::fs::read(run.join(f)).unwrap(), std::fs::read(replayed.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn ablation_prints_reference_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    tiny_phantoms(&data, "3");
    let out = tmp.path().join("abl");
    let stdout = ok(&[
        "ablate",
        "--data",
        s(&data),
        "--set",
        "base.epochs=1",
        "--set",
        "base.net.input_size=[32,32]",
        "--set",
        "base.data.presets=[\"mild\"]",
        "--out",
        s(&out),
    ]);
    for reference in ["71.66", "99.25", "28.83", "95.03"] {
        assert!(stdout.contains(reference), "missing {reference} in\n{stdout}");
    }
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "table,experiment,ssim_percent,mse,psnr,ref_ssim_percent,ref_mse,ref_psnr"
    );
    assert_eq!(lines.count(), 5);
}

#[test]
fn severity_study_reports_nine_r2_values() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["phantom", "--count", "5", "--dims", "32,32,16", "--out", s(&data)]);
    let out = tmp.path().join("study");
    let stdout = ok(&["severity-study", "--phantoms", s(&data), "--out", s(&out)]);
    assert_eq!(json(&out.join("r2.json")).as_array().unwrap().len(), 9);
    assert!(stdout.contains("0.9243"));
    for m in ["ssim", "mse", "psnr"] {
        let csv = std::fs::read_to_string(out.join(format!("scatter_{m}.csv"))).unwrap();
        assert!(csv.starts_with("subject_id,slice_index,mild,moderate,severe\n"));
    }
}

#[test]
fn gradcheck_subset_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gc");
    let stdout = ok(&["gradcheck", "--ops", "conv2d,relu", "--trials", "3", "--out", s(&out)]);
    assert!(stdout.contains("conv2d") && stdout.contains("relu"));
    let rows = json(&out.join("gradcheck.json"));
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(mocorr(&["gradcheck", "--ops", "bogus", "--out", s(&out)]).status.code(), Some(1));
}
