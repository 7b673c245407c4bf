use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use resnest::analysis::{bench_forward, bench_layouts, compare, count_flops, match_known, tensor_hash};
use resnest::checkpoint::{Checkpoint, StoredTensor};
use resnest::network::{parse_kv, KvEntry, Network, NetworkConfig, NETWORK_KEYS};
use resnest::splat::{Fault, SplatConfig};
use resnest::training::{TrainConfig, Trainer, TRAIN_KEYS};
use resnest::verify::{self, Suite};
use resnest::{Error, RngState, Scalar};

/// Split-Attention networks: cost analysis, numerical verification,
/// benchmarking and desk-scale training.
///
/// Config files hold one `key = value` per line with `#` comments. Any
/// config key can also be given on the command line as `--key value`
/// (dashes and underscores are interchangeable); flags win over the file.
#[derive(Parser, Debug)]
#[command(name = "resnest", version)]
struct Cli {
    /// Floating-point precision for bench and train.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,

    #[command(subcommand)]
    command: Command,

    /// Filled from `--key value` pairs that are not flags.
    #[arg(skip)]
    overrides: Vec<KvEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer parameter and MAC report.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Square input side.
        #[arg(long, default_value_t = 224)]
        size: usize,
    },
    /// Run numerical self-checks; exits 1 if any fails.
    Verify {
        /// equivalence, gradcheck, attention, schedule, loss, recipe or all.
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Plant a defect to confirm the suites catch it.
        #[arg(long, value_enum, hide = true)]
        fault: Option<FaultArg>,
    },
    /// Time eval-mode forwards of a network.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 30)]
        reps: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also time one split-attention unit in both group layouts.
        #[arg(long)]
        layouts: bool,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the synthetic two-class task.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path written when training stops.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metric log path; stdout when absent.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// List the tensors in a checkpoint.
    InspectCheckpoint { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    FlipFuseSign,
}

/// A failure with its exit status.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parse { .. } | Error::Io(_) | Error::Checkpoint(_) => 2,
            Error::Shape { .. } | Error::Diverged { .. } => 1,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

type Outcome = std::result::Result<ExitCode, Failure>;

/// Long flag names the subcommand (or the top level) declares.
fn declared_flags(sub: &str) -> Vec<String> {
    let cmd = Cli::command();
    let mut names: Vec<String> = vec!["help".into(), "version".into()];
    let own = cmd.get_arguments().filter_map(|a| a.get_long()).map(String::from);
    names.extend(own.collect::<Vec<_>>());
    if let Some(s) = cmd.find_subcommand(sub) {
        names.extend(s.get_arguments().filter_map(|a| a.get_long()).map(String::from));
    }
    names
}

/// Splits `--key value` config overrides from the arguments clap handles.
fn split_overrides(args: Vec<String>) -> std::result::Result<(Vec<String>, Vec<KvEntry>), Failure> {
    let cmd = Cli::command();
    let sub = args
        .iter()
        .skip(1)
        .find(|a| cmd.find_subcommand(a.as_str()).is_some())
        .cloned();
    let Some(sub) = sub else {
        return Ok((args, Vec::new()));
    };
    let flags = declared_flags(&sub);
    let mut kept = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut seen_sub = false;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if !seen_sub {
            seen_sub = a == sub;
            kept.push(a);
            continue;
        }
        let Some(body) = a.strip_prefix("--").filter(|b| !b.is_empty()) else {
            kept.push(a);
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if flags.contains(&name) {
            kept.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| usage(format!("--{name} needs a value")))?,
        };
        overrides.push(KvEntry {
            line: 0,
            key: name.replace('-', "_"),
            value,
        });
    }
    Ok((kept, overrides))
}

fn read_entries(config: Option<&Path>) -> Result<Vec<KvEntry>, Failure> {
    match config {
        None => Ok(Vec::new()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            Ok(parse_kv(&text)?)
        }
    }
}

/// File entries with command-line overrides applied on top. Override keys
/// outside `allowed` are rejected here so the message names the flag.
fn merge(mut entries: Vec<KvEntry>, overrides: &[KvEntry], allowed: &[&str]) -> Result<Vec<KvEntry>, Failure> {
    for o in overrides {
        if !allowed.contains(&o.key.as_str()) {
            return Err(usage(format!(
                "unknown key {:?} (from --{})",
                o.key,
                o.key.replace('_', "-")
            )));
        }
        entries.retain(|e| e.key != o.key);
        entries.push(o.clone());
    }
    Ok(entries)
}

fn network_config(config: Option<&Path>, overrides: &[KvEntry]) -> Result<NetworkConfig, Failure> {
    let entries = merge(read_entries(config)?, overrides, NETWORK_KEYS)?;
    Ok(NetworkConfig::from_entries(&entries, &[])?)
}

fn echo_config(out: &mut String, cfg: &NetworkConfig) {
    let _ = writeln!(out, "# depth = {}", cfg.depth);
    for line in cfg.to_kv().lines() {
        let _ = writeln!(out, "# {line}");
    }
}

fn cmd_analyze(config: Option<&Path>, size: usize, overrides: &[KvEntry]) -> Outcome {
    let cfg = network_config(config, overrides)?;
    let report = count_flops(&cfg.plan()?, (size, size))?;
    let mut out = String::new();
    echo_config(&mut out, &cfg);
    let _ = writeln!(out, "{report}");
    let _ = writeln!(out, "{}", report.machine_lines());
    if let Some(known) = match_known(&cfg)? {
        if size == 224 {
            let _ = writeln!(out, "{}", compare(&known, &report));
        } else {
            let _ = writeln!(out, "{}: reference row is for 224x224 input; not compared", known.name);
        }
    }
    print!("{out}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(suite: &str, seed: u64, fault: Option<FaultArg>) -> Outcome {
    let suite: Suite = suite.parse()?;
    let opts = verify::Options {
        seed,
        fault: match fault {
            Some(FaultArg::FlipFuseSign) => Fault::FlipFuseSign,
            None => Fault::None,
        },
    };
    let report = verify::run(suite, &opts)?;
    println!("{report}");
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

struct BenchArgs {
    batch: usize,
    size: usize,
    reps: usize,
    warmup: usize,
    seed: u64,
    layouts: bool,
}

fn bench<T: Scalar>(cfg: &NetworkConfig, a: &BenchArgs) -> Result<String, Failure> {
    let mut out = String::new();
    echo_config(&mut out, cfg);
    let _ = writeln!(
        out,
        "# precision {:?} input {}x{}x{}x{}",
        T::DTYPE,
        a.batch,
        cfg.input_channels,
        a.size,
        a.size
    );
    let mut net = Network::<T>::new(cfg, &mut RngState::new(a.seed))?;
    let stats = bench_forward(
        &mut net,
        [a.batch, cfg.input_channels, a.size, a.size],
        a.reps,
        a.warmup,
        a.seed,
    )?;
    let _ = writeln!(out, "{stats}");
    if a.layouts {
        if cfg.radix == 0 {
            let _ = writeln!(out, "layouts: radix 0 has no split-attention unit");
        } else {
            let w = cfg.group_width(cfg.base_planes);
            let unit = SplatConfig::new(w, w, cfg.radix, cfg.cardinality).with_transform_width(w);
            let side = (a.size / 4).max(1);
            let t = bench_layouts(&unit, [a.batch, w, side, side], a.reps, a.seed)?;
            let _ = writeln!(
                out,
                "layouts (first-stage unit, {w} channels, {side}x{side}, f64): radix-major {:.3} ms  \
                 cardinality-major {:.3} ms  ratio {:.2}",
                t.radix_major_ms,
                t.cardinality_major_ms,
                t.slowdown()
            );
        }
    }
    Ok(out)
}

fn cmd_bench(
    config: Option<&Path>,
    a: BenchArgs,
    out_path: Option<&Path>,
    precision: Precision,
    overrides: &[KvEntry],
) -> Outcome {
    let cfg = network_config(config, overrides)?;
    let out = match precision {
        Precision::F32 => bench::<f32>(&cfg, &a)?,
        Precision::F64 => bench::<f64>(&cfg, &a)?,
    };
    print!("{out}");
    if let Some(p) = out_path {
        fs::write(p, &out).map_err(|e| usage(format!("cannot write {}: {e}", p.display())))?;
    }
    Ok(ExitCode::SUCCESS)
}

struct TrainArgs<'a> {
    config: Option<&'a Path>,
    seed: Option<u64>,
    out: Option<&'a Path>,
    log: Option<&'a Path>,
    resume: Option<&'a Path>,
    stop_after: Option<usize>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn train<T: Scalar>(cfg: TrainConfig, a: &TrainArgs<'_>) -> Outcome {
    let mut trainer = match a.resume {
        Some(p) => Trainer::<T>::resume(cfg, &Checkpoint::load(p)?)?,
        None => Trainer::<T>::new(cfg)?,
    };
    let end = a.stop_after.unwrap_or(trainer.cfg.epochs).min(trainer.cfg.epochs);
    match a.log {
        Some(p) => write_file(p, trainer.metric_log().as_bytes())?,
        None => {
            print!("{}", trainer.metric_log());
            let _ = std::io::stdout().flush();
        }
    }
    let mut result = Ok(());
    while trainer.epochs_done() < end {
        match trainer.run_epoch() {
            Ok(m) => match a.log {
                Some(p) => write_file(p, trainer.metric_log().as_bytes())?,
                None => {
                    println!("{}", m.log_line());
                    let _ = std::io::stdout().flush();
                }
            },
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    if let Some(p) = a.out {
        trainer.checkpoint().save(p)?;
        eprintln!(
            "checkpoint after epoch {} written to {}",
            trainer.epochs_done(),
            p.display()
        );
    }
    result?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs<'_>, precision: Precision, overrides: &[KvEntry]) -> Outcome {
    let allowed: Vec<&str> = NETWORK_KEYS.iter().chain(TRAIN_KEYS).copied().collect();
    let mut entries = merge(read_entries(a.config)?, overrides, &allowed)?;
    if let Some(seed) = a.seed {
        entries.retain(|e| e.key != "seed");
        entries.push(KvEntry {
            line: 0,
            key: "seed".into(),
            value: seed.to_string(),
        });
    }
    let cfg = TrainConfig::from_entries(&entries)?;
    match precision {
        Precision::F32 => train::<f32>(cfg, &a),
        Precision::F64 => train::<f64>(cfg, &a),
    }
}

fn stored_hash(t: &StoredTensor) -> String {
    match t {
        StoredTensor::F32(t) => tensor_hash(t),
        StoredTensor::F64(t) => tensor_hash(t),
    }
}

fn cmd_inspect(path: &Path) -> Outcome {
    let ck = Checkpoint::load(path)?;
    let mut out = String::new();
    let mut values = 0usize;
    for (name, t) in &ck.entries {
        let n: usize = t.shape().iter().product();
        values += n;
        let _ = writeln!(
            out,
            "{name}\t{:?}\t{:?}\t{}",
            t.dtype(),
            t.shape(),
            &stored_hash(t)[..16]
        );
    }
    let _ = writeln!(out, "{} tensors, {} values", ck.entries.len(), values);
    if let Some(state) = ck.get("trainer.state") {
        let s = state.to::<f64>();
        if let [done, hi, lo] = s.data() {
            let seed = ((*hi as u64) << 32) | *lo as u64;
            let _ = writeln!(out, "trainer: {done} epochs done, seed {seed}");
        }
    }
    print!("{out}");
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: Cli) -> Outcome {
    let ov = &cli.overrides;
    let no_overrides = |cmd: &str| -> Result<(), Failure> {
        match ov.first() {
            Some(o) => Err(usage(format!(
                "{cmd} takes no config keys; got --{}",
                o.key.replace('_', "-")
            ))),
            None => Ok(()),
        }
    };
    match cli.command {
        Command::Analyze { config, size } => cmd_analyze(config.as_deref(), size, ov),
        Command::Verify { suite, seed, fault } => {
            no_overrides("verify")?;
            cmd_verify(&suite, seed, fault)
        }
        Command::Bench {
            config,
            batch,
            size,
            reps,
            warmup,
            seed,
            layouts,
            out,
        } => cmd_bench(
            config.as_deref(),
            BenchArgs {
                batch,
                size,
                reps,
                warmup,
                seed,
                layouts,
            },
            out.as_deref(),
            cli.precision,
            ov,
        ),
        Command::Train {
            config,
            seed,
            out,
            log,
            resume,
            stop_after,
        } => cmd_train(
            TrainArgs {
                config: config.as_deref(),
                seed,
                out: out.as_deref(),
                log: log.as_deref(),
                resume: resume.as_deref(),
                stop_after,
            },
            cli.precision,
            ov,
        ),
        Command::InspectCheckpoint { path } => {
            no_overrides("inspect-checkpoint")?;
            cmd_inspect(&path)
        }
    }
}

fn main() -> ExitCode {
    let result = split_overrides(std::env::args().collect()).and_then(|(args, overrides)| {
        let mut cli = match Cli::try_parse_from(args) {
            Ok(c) => c,
            Err(e) => {
                let _ = e.print();
                return Ok(ExitCode::from(if e.use_stderr() { 2 } else { 0 }));
            }
        };
        cli.overrides = overrides;
        dispatch(cli)
    });
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
