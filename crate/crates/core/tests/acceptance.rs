//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with a custom harness so the lines come out in order and unbuffered.
//! Criteria listed in `KNOWN_FAILURES` are reported as FAIL and do not fail
//! the target; if one of them starts passing the target fails, so the list
//! cannot go stale.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use resnest::analysis::{block_cost_parity, compare, count_flops, known_variants};
use resnest::network::NetworkConfig;
use resnest::splat::SplatConfig;
use resnest::training::{TrainConfig, Trainer};
use resnest::verify::{self, Check, Options, Report, Suite};

/// Criterion 5: the 2s8x14d row of the reference table cannot be reproduced
/// by the cost model (26.49M / 4.51G against 27.5M / 4.34G); see README.
const KNOWN_FAILURES: &[usize] = &[5];

struct Outcome {
    passed: bool,
    detail: Vec<String>,
}

impl Outcome {
    fn from_checks<'a>(checks: impl IntoIterator<Item = &'a Check>) -> Self {
        let mut passed = true;
        let mut detail = Vec::new();
        for c in checks {
            passed &= c.passed();
            detail.push(c.to_string());
        }
        Outcome { passed, detail }
    }

    fn with_time_limit(mut self, took: Duration, limit: Duration) -> Self {
        let ok = took < limit;
        self.passed &= ok;
        self.detail.push(format!(
            "runtime {:.2}s (limit {}s) {}",
            took.as_secs_f64(),
            limit.as_secs(),
            if ok { "ok" } else { "exceeded" }
        ));
        self
    }
}

fn suite(s: Suite) -> Report {
    verify::run(s, &Options::default()).expect("suite runs")
}

fn c1() -> Outcome {
    let t = Instant::now();
    let r = suite(Suite::Equivalence);
    Outcome::from_checks(&r.checks).with_time_limit(t.elapsed(), Duration::from_secs(60))
}

fn c2() -> Outcome {
    let r = suite(Suite::Attention);
    Outcome::from_checks(
        r.checks
            .iter()
            .filter(|c| c.name.starts_with("R>1") || c.name.contains("distance")),
    )
}

fn c3() -> Outcome {
    let r = suite(Suite::Attention);
    Outcome::from_checks(
        r.checks
            .iter()
            .filter(|c| c.name.contains("squeeze") || c.name.starts_with("R=2")),
    )
}

fn c4() -> Outcome {
    let t = Instant::now();
    let r = suite(Suite::Gradcheck);
    Outcome::from_checks(&r.checks).with_time_limit(t.elapsed(), Duration::from_secs(120))
}

fn c5() -> Outcome {
    let t = Instant::now();
    let mut passed = true;
    let mut detail = Vec::new();
    for k in known_variants().expect("presets") {
        let report = count_flops(&k.config.plan().expect("plan"), (224, 224)).expect("cost");
        let c = compare(&k, &report);
        // ResNet-D is only specified by its parameter count.
        let ok = if k.name == "ResNetD-50" {
            c.params_ok
        } else {
            c.matched()
        };
        passed &= ok;
        detail.push(format!("{c} -> {}", if ok { "PASS" } else { "FAIL" }));
    }
    let fast = NetworkConfig::resnest(50).unwrap().with_fast(true);
    let r = count_flops(&fast.plan().unwrap(), (224, 224)).unwrap();
    detail.push(format!(
        "for reference, 2s1x64d-fast: params {:.2}M GMACs {:.3}",
        r.total_params() as f64 / 1e6,
        r.total_macs() as f64 / 1e9
    ));
    Outcome { passed, detail }.with_time_limit(t.elapsed(), Duration::from_secs(1))
}

fn c6() -> Outcome {
    let cfg = SplatConfig::new(256, 64, 2, 1).with_transform_width(64);
    let p = block_cost_parity(&cfg, 64, (56, 56)).expect("parity");
    let range = 0.9..=1.15;
    Outcome {
        passed: range.contains(&p.param_ratio()) && range.contains(&p.mac_ratio()),
        detail: vec![
            format!("{p}"),
            format!(
                "param ratio {:.4}, MAC ratio {:.4}, both in [0.9, 1.15]",
                p.param_ratio(),
                p.mac_ratio()
            ),
        ],
    }
}

fn c7() -> Outcome {
    let r = suite(Suite::Schedule);
    Outcome::from_checks(&r.checks)
}

fn c8() -> Outcome {
    let loss = suite(Suite::Loss);
    let recipe = suite(Suite::Recipe);
    Outcome::from_checks(
        loss.checks
            .iter()
            .filter(|c| c.name.starts_with("smoothed"))
            .chain(&recipe.checks),
    )
}

fn c9() -> Outcome {
    let t = Instant::now();
    let mut splat = Trainer::<f64>::new(TrainConfig::toy(2)).expect("trainer");
    splat.run(None).expect("training");
    let mut control = Trainer::<f64>::new(TrainConfig::toy(0)).expect("trainer");
    control.run(Some(5)).expect("training");
    let best = splat.history().iter().map(|m| m.accuracy).fold(0.0, f64::max);
    let at5 = splat.history()[4].accuracy;
    let control5 = control.history()[4].accuracy;
    let mut detail = vec![format!(
        "R=2 accuracy by epoch: {}",
        splat
            .history()
            .iter()
            .map(|m| format!("{:.3}", m.accuracy))
            .collect::<Vec<_>>()
            .join(" ")
    )];
    detail.push(format!(
        "R=2 best {best:.3} (need >= 0.95); epoch 5: R=2 {at5:.3} vs R=0 {control5:.3} (need >)"
    ));
    Outcome {
        passed: best >= 0.95 && at5 > control5,
        detail,
    }
    .with_time_limit(t.elapsed(), Duration::from_secs(600))
}

fn train_run(dir: &Path, cfg: &Path) -> (Vec<u8>, Vec<u8>) {
    let log = dir.join("log.tsv");
    let ck = dir.join("model.ckpt");
    let status = Command::new(env!("CARGO_BIN_EXE_resnest"))
        .arg("train")
        .arg("--config")
        .arg(cfg)
        .arg("--log")
        .arg(&log)
        .arg("--out")
        .arg(&ck)
        .status()
        .expect("spawn cli");
    assert!(status.success(), "train exited with {status}");
    (fs::read(log).unwrap(), fs::read(ck).unwrap())
}

fn c10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("toy.cfg");
    fs::write(
        &cfg,
        "# tiny run\nepochs = 3\nsamples = 64\nbatch = 16\nseed = 7\nmixup_alpha = 0.2\nsmoothing = 0.1\n",
    )
    .unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fs::create_dir(&a).unwrap();
    fs::create_dir(&b).unwrap();
    let (log_a, ck_a) = train_run(&a, &cfg);
    let (log_b, ck_b) = train_run(&b, &cfg);
    Outcome {
        passed: log_a == log_b && ck_a == ck_b && !ck_a.is_empty(),
        detail: vec![format!(
            "metric log {} bytes identical: {}; checkpoint {} bytes identical: {}",
            log_a.len(),
            log_a == log_b,
            ck_a.len(),
            ck_a == ck_b
        )],
    }
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "layout equivalence on the 27-point grid", c1),
        (2, "attention weights normalised", c2),
        (3, "SE and SK reductions", c3),
        (4, "finite-difference gradients", c4),
        (5, "cost model against the reference table", c5),
        (6, "splat vs standard bottleneck cost parity", c6),
        (7, "warmup and cosine schedule", c7),
        (8, "smoothing, mixup and zero-gamma start", c8),
        (9, "desk-scale learning and radix ablation", c9),
        (10, "deterministic training runs", c10),
    ];
    // `cargo test -- --list` expects no output from a custom harness.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut unexpected = Vec::new();
    for (n, name, run) in criteria {
        let out = run();
        for line in &out.detail {
            println!("    {line}");
        }
        let known = KNOWN_FAILURES.contains(&n);
        let verdict = match (out.passed, known) {
            (true, false) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (known, see README)",
            (true, true) => "PASS (listed as a known failure)",
        };
        println!("criterion {n:>2}: {name}: {verdict}");
        if out.passed == known {
            unexpected.push(n);
        }
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected outcomes for criteria {unexpected:?}");
        ExitCode::FAILURE
    }
}
