use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resnest"))
        .args(args)
        .output()
        .expect("spawn cli")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &["--epochs", "3", "--samples", "32", "--batch", "16"];

#[test]
fn analyze_prints_totals() {
    let o = cli(&[
        "analyze",
        "--depth",
        "50",
        "--radix",
        "2",
        "--cardinality",
        "1",
        "--base-width",
        "64",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("total\t")), "{out}");
    assert!(out.contains("stage1.block0.splat.conv2"));
}

#[test]
fn classic_resnet50_matches_reference_row() {
    let o = cli(&["analyze", "--radix", "0", "--deep-stem", "false", "--avg-down", "false"]);
    assert_eq!(o.status.code(), Some(0));
    let row = stdout(&o)
        .lines()
        .find(|l| l.starts_with("ResNet-50:"))
        .map(String::from)
        .expect("row");
    assert!(row.ends_with("MATCH"), "{row}");
}

#[test]
fn unknown_keys_exit_2_and_are_named() {
    let o = cli(&["analyze", "--depht", "50"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("depht"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("net.cfg");
    fs::write(&cfg, "radix = 2\ndepht = 50\n").unwrap();
    let o = cli(&["analyze", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("\"depht\" on line 2"), "{}", stderr(&o));

    let o = cli(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_values_and_usage_exit_2() {
    assert_eq!(cli(&["analyze", "--radix", "two"]).status.code(), Some(2));
    assert_eq!(
        cli(&["analyze", "--cardinality", "3", "--base-width", "7"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cli(&["verify", "gradients"]).status.code(), Some(2));
    assert_eq!(
        cli(&["inspect-checkpoint", "/nonexistent/x.ckpt"]).status.code(),
        Some(2)
    );
}

#[test]
fn verify_equivalence_prints_grid() {
    let o = cli(&["verify", "equivalence"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    for (r, k, c) in [(1, 1, 8), (2, 4, 16), (4, 4, 32)] {
        assert!(out.contains(&format!("R={r} K={k} C={c} max|diff|")), "{out}");
    }
}

#[test]
fn planted_fault_fails_verification() {
    let o = cli(&["verify", "equivalence", "--fault", "flip-fuse-sign"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn bench_echoes_config_and_repeats_hash() {
    let args = [
        "bench",
        "--stage-blocks",
        "1,1,1,1",
        "--base-planes",
        "8",
        "--stem-width",
        "4",
        "--classes",
        "2",
        "--size",
        "32",
        "--reps",
        "2",
        "--warmup",
        "0",
        "--seed",
        "5",
    ];
    let a = stdout(&cli(&args));
    let b = stdout(&cli(&args));
    assert!(a.contains("# radix = 2") && a.contains("per-image"), "{a}");
    let hash = |s: &str| {
        s.lines()
            .find(|l| l.starts_with("logits sha256:"))
            .map(String::from)
            .unwrap()
    };
    assert_eq!(hash(&a), hash(&b));
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    let o = Command::new(env!("CARGO_BIN_EXE_resnest"))
        .args(&args)
        .current_dir(dir)
        .output()
        .expect("spawn cli");
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    o
}

#[test]
fn train_defaults_seed_and_resume_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let full = train(d, &["--out", "full.ckpt"]);
    let log = stdout(&full);
    assert!(log.starts_with("# seed 0\n"), "{log}");
    assert_eq!(log.lines().filter(|l| l.split('\t').count() == 4).count(), 4);

    train(d, &["--out", "half.ckpt", "--stop-after", "1"]);
    let resumed = train(
        d,
        &["--resume", "half.ckpt", "--out", "resumed.ckpt", "--log", "resumed.log"],
    );
    assert!(stdout(&resumed).is_empty());
    assert_eq!(fs::read_to_string(d.join("resumed.log")).unwrap(), log);
    assert_eq!(
        fs::read(d.join("resumed.ckpt")).unwrap(),
        fs::read(d.join("full.ckpt")).unwrap()
    );

    let o = cli(&["inspect-checkpoint", d.join("full.ckpt").to_str().unwrap()]);
    assert!(stdout(&o).contains("trainer: 3 epochs done, seed 0"), "{}", stdout(&o));

    let other = Command::new(env!("CARGO_BIN_EXE_resnest"))
        .args([
            "train",
            "--epochs",
            "3",
            "--samples",
            "32",
            "--batch",
            "16",
            "--seed",
            "4",
            "--resume",
            "half.ckpt",
        ])
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(other.status.code(), Some(2));
    assert!(stderr(&other).contains("seed"));
}
