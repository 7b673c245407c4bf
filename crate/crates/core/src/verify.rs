//! Numerical self-checks shared by the `verify` command and the test suite.
//!
//! Each suite returns a list of [`Check`]s: a measured value, the bound it
//! must respect and the verdict. Nothing here panics on a failed check.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, grad_check_module, DEFAULT_STEP};
use crate::network::{Network, NetworkConfig};
use crate::nn::{Ctx, Module};
use crate::ops::Mode;
use crate::rng::RngState;
use crate::splat::reference::squeeze_and_gate;
use crate::splat::{
    forward_cardinality_major, permute_params, Direction, Fault, SplatConfig, SplatParams, SplatUnit, SplitWeights,
};
use crate::tensor::Tensor;
use crate::training::{
    label_smooth_ce, lr_at, mixup_with_lambdas, one_hot, sample_lambdas, smooth_targets, ScheduleConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Equivalence,
    Gradcheck,
    Attention,
    Schedule,
    Loss,
    /// Mixup convexity and the zero-initialised residual start.
    Recipe,
    All,
}

impl Suite {
    /// Every concrete suite, in the order `All` runs them.
    pub const EACH: [Suite; 6] = [
        Suite::Equivalence,
        Suite::Attention,
        Suite::Gradcheck,
        Suite::Schedule,
        Suite::Loss,
        Suite::Recipe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Equivalence => "equivalence",
            Suite::Gradcheck => "gradcheck",
            Suite::Attention => "attention",
            Suite::Schedule => "schedule",
            Suite::Loss => "loss",
            Suite::Recipe => "recipe",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::EACH
            .into_iter()
            .chain([Suite::All])
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown suite {s:?}; expected equivalence, gradcheck, attention, schedule, loss, recipe or all"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    Below,
    AtMost,
    Above,
}

impl Relation {
    fn holds(self, value: f64, bound: f64) -> bool {
        match self {
            Relation::Below => value < bound,
            Relation::AtMost => value <= bound,
            Relation::Above => value > bound,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Relation::Below => "<",
            Relation::AtMost => "<=",
            Relation::Above => ">",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub value: f64,
    pub relation: Relation,
    pub bound: f64,
}

impl Check {
    fn new(suite: Suite, name: impl Into<String>, value: f64, relation: Relation, bound: f64) -> Self {
        Check {
            suite,
            name: name.into(),
            value,
            relation,
            bound,
        }
    }

    /// NaN never passes.
    pub fn passed(&self) -> bool {
        self.relation.holds(self.value, self.bound)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<12} {:<44} {:>11.3e} {} {:<9.1e} {}",
            self.suite.name(),
            self.name,
            self.value,
            self.relation.symbol(),
            self.bound,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn suite(&self, s: Suite) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(move |c| c.suite == s)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.failures().count();
        write!(
            f,
            "{} checks, {} failed: {}",
            self.checks.len(),
            failed,
            if failed == 0 { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Options {
    pub seed: u64,
    /// Planted into every unit built by the suites.
    pub fault: Fault,
}

pub fn run(suite: Suite, opts: &Options) -> Result<Report> {
    let mut checks = Vec::new();
    let suites: Vec<Suite> = if suite == Suite::All {
        Suite::EACH.to_vec()
    } else {
        vec![suite]
    };
    for s in suites {
        let mut rng = RngState::new(opts.seed).fork(s as u64 + 1);
        let found = match s {
            Suite::Equivalence => equivalence(opts.fault, &mut rng)?,
            Suite::Attention => attention(opts.fault, &mut rng)?,
            Suite::Gradcheck => gradcheck(opts.fault, &mut rng)?,
            Suite::Schedule => schedule()?,
            Suite::Loss => loss(&mut rng)?,
            Suite::Recipe => recipe(&mut rng)?,
            Suite::All => unreachable!(),
        };
        checks.extend(found);
    }
    Ok(Report { checks })
}

/// The `(R, K, C)` points of the layout grid.
pub fn equivalence_grid() -> Vec<(usize, usize, usize)> {
    let mut v = Vec::with_capacity(27);
    for r in [1, 2, 4] {
        for k in [1, 2, 4] {
            for c in [8, 16, 32] {
                v.push((r, k, c));
            }
        }
    }
    v
}

const GRID_IN: usize = 8;
const GRID_INPUT: [usize; 4] = [2, GRID_IN, 8, 8];

fn grid_config(r: usize, k: usize, c: usize) -> SplatConfig {
    SplatConfig::new(GRID_IN, c, r, k)
}

fn run_unit(unit: &mut SplatUnit<f64>, x: &Tensor<f64>, mode: Mode) -> Result<Tensor<f64>> {
    let mut rng = RngState::new(0);
    unit.forward(x, &mut Ctx::new(mode, &mut rng))
}

/// Largest `|cardinality-major - radix-major ∘ permute|` over both modes.
fn equivalence(fault: Fault, rng: &mut RngState) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (r, k, c) in equivalence_grid() {
        let cfg = grid_config(r, k, c);
        let card = SplatParams::<f64>::random(&cfg, rng);
        let radix = permute_params(&card, &cfg, Direction::CardinalityToRadix)?;
        let mut unit = SplatUnit::from_params("eq", cfg, &radix)?;
        unit.fault = fault;
        let x = Tensor::randn(&GRID_INPUT, 1.0, rng);
        let mut worst = 0.0f64;
        for mode in [Mode::Eval, Mode::Train] {
            let a = forward_cardinality_major(&x, &cfg, &card, mode)?;
            let b = run_unit(&mut unit, &x, mode)?;
            worst = worst.max(a.max_abs_diff(&b)?);
        }
        out.push(Check::new(
            Suite::Equivalence,
            format!("R={r} K={k} C={c} max|diff|"),
            worst,
            Relation::Below,
            1e-10,
        ));
    }
    Ok(out)
}

fn weights_of(unit: &SplatUnit<f64>) -> Result<&SplitWeights<f64>> {
    unit.last_attention()
        .ok_or_else(|| Error::config("verify: unit recorded no attention weights"))
}

/// Largest `|Σ_r a(n,k,r,c) - 1|`.
fn sum_error(a: &SplitWeights<f64>) -> f64 {
    let (n, cg) = (a.0.shape()[0], a.0.shape()[3]);
    let mut worst = 0.0f64;
    for ni in 0..n {
        for k in 0..a.cardinality() {
            for c in 0..cg {
                let s: f64 = (0..a.radix()).map(|r| a.at(ni, k, r, c)).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    worst
}

fn attention(fault: Fault, rng: &mut RngState) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut worst_sum = 0.0f64;
    let mut worst_pair = 0.0f64;
    let mut margin = f64::INFINITY;
    let mut worst_se = 0.0f64;
    for (r, k, c) in equivalence_grid() {
        let cfg = grid_config(r, k, c);
        let params = SplatParams::<f64>::random(&cfg, rng);
        let mut unit = SplatUnit::from_params("att", cfg, &params)?;
        unit.fault = fault;
        let x = Tensor::randn(&GRID_INPUT, 1.0, rng);
        for mode in [Mode::Eval, Mode::Train] {
            let y = run_unit(&mut unit, &x, mode)?;
            let a = weights_of(&unit)?;
            if r > 1 {
                worst_sum = worst_sum.max(sum_error(a));
                if r == 2 {
                    worst_pair = worst_pair.max(sum_error(a));
                }
            } else {
                for &w in a.0.data() {
                    margin = margin.min(w).min(1.0 - w);
                }
                let reference = squeeze_and_gate(&x, &cfg, &params, mode)?;
                worst_se = worst_se.max(reference.max_abs_diff(&y)?);
            }
        }
    }
    out.push(Check::new(
        Suite::Attention,
        "R>1 max|sum_r a - 1|",
        worst_sum,
        Relation::Below,
        1e-12,
    ));
    out.push(Check::new(
        Suite::Attention,
        "R=1 min distance of a to {0,1}",
        margin,
        Relation::Above,
        0.0,
    ));
    out.push(Check::new(
        Suite::Attention,
        "R=1 unit vs squeeze-and-gate max|diff|",
        worst_se,
        Relation::Below,
        1e-10,
    ));
    out.push(Check::new(
        Suite::Attention,
        "R=2 max|a_1 + a_2 - 1|",
        worst_pair,
        Relation::Below,
        1e-12,
    ));
    Ok(out)
}

fn gradcheck(fault: Fault, rng: &mut RngState) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let cases = [
        ("R=2 K=2", SplatConfig::new(3, 4, 2, 2).with_attention_inner(6)),
        ("R=1 K=2", SplatConfig::new(3, 4, 1, 2).with_attention_inner(6)),
        (
            "R=2 K=1 stride 2",
            SplatConfig::new(3, 4, 2, 1)
                .with_attention_inner(4)
                .with_stride(2)
                .with_fast(false),
        ),
    ];
    for (label, cfg) in cases {
        let mut p = SplatParams::<f64>::random(&cfg, rng);
        p.bn1.gamma.fill(1.0);
        let mut unit = SplatUnit::from_params("g", cfg, &p)?;
        unit.fault = fault;
        let x = Tensor::randn(&[4, 3, 5, 5], 1.0, rng);
        let y = run_unit(&mut unit, &x, Mode::Train)?;
        let proj = Tensor::randn(y.shape(), 1.0, rng);
        let dx = unit.backward(&proj)?;
        let objective = |m: &mut SplatUnit<f64>, input: &Tensor<f64>| {
            run_unit(m, input, Mode::Train)
                .and_then(|y| y.dot(&proj))
                .unwrap_or(f64::NAN)
        };
        let params = grad_check_module(&mut unit, DEFAULT_STEP, 1e-4, |m| objective(m, &x));
        let mut probe = unit.clone();
        let input = grad_check(&["x"], std::slice::from_ref(&x), &[dx], DEFAULT_STEP, 1e-4, |t| {
            objective(&mut probe, &t[0])
        });
        out.push(Check::new(
            Suite::Gradcheck,
            format!("splat {label} params max rel err"),
            params.max_rel_err(),
            Relation::Below,
            1e-4,
        ));
        out.push(Check::new(
            Suite::Gradcheck,
            format!("splat {label} input max rel err"),
            input.max_rel_err(),
            Relation::Below,
            1e-4,
        ));
    }
    for eps in [0.0, 0.1] {
        let labels = [0, 3, 4, 1];
        // Below ~3e-5 a central difference's rounding floor alone exceeds a
        // 1e-6 relative error, so probe where every entry is well above it.
        let (z, g) = loop {
            let z = Tensor::<f64>::randn(&[4, 5], 2.0, rng);
            let (_, g) = label_smooth_ce(&z, &labels, eps)?;
            if g.data().iter().all(|v| v.abs() >= 1e-3) {
                break (z, g);
            }
        };
        let report = grad_check(&["logits"], &[z], &[g], DEFAULT_STEP, 1e-6, |t| {
            label_smooth_ce(&t[0], &labels, eps).map_or(f64::NAN, |(l, _)| l)
        });
        out.push(Check::new(
            Suite::Gradcheck,
            format!("label-smoothed CE eps={eps} max rel err"),
            report.max_rel_err(),
            Relation::Below,
            1e-6,
        ));
    }
    Ok(out)
}

/// Large-batch warmup-cosine schedule with `T >= 10^4` steps.
pub fn reference_schedule() -> ScheduleConfig {
    ScheduleConfig {
        base_lr: 0.1,
        batch_size: 8192,
        warmup_epochs: 5,
        total_epochs: 120,
        steps_per_epoch: 100,
    }
}

fn schedule() -> Result<Vec<Check>> {
    let cfg = reference_schedule();
    let warm = cfg.warmup_steps();
    let total = cfg.total_steps();
    let peak = cfg.peak_lr();
    let first = lr_at(0, &cfg)?;
    let top = lr_at(warm - 1, &cfg)?;
    let after = lr_at(warm, &cfg)?;
    let last = lr_at(total - 1, &cfg)?;
    Ok(vec![
        Check::new(
            Suite::Schedule,
            "|lr(0) - peak/warmup_steps|",
            (first - peak / warm as f64).abs(),
            Relation::AtMost,
            0.0,
        ),
        Check::new(
            Suite::Schedule,
            "|lr(end of warmup) - 3.2|",
            (top - 3.2).abs(),
            Relation::AtMost,
            0.0,
        ),
        Check::new(
            Suite::Schedule,
            "|lr(warmup) - lr(warmup - 1)|",
            (after - top).abs(),
            Relation::Below,
            1e-12,
        ),
        Check::new(
            Suite::Schedule,
            "lr(T - 1) / (1e-3 * peak)",
            last / (1e-3 * peak),
            Relation::Below,
            1.0,
        ),
        Check::new(Suite::Schedule, "total steps", total as f64, Relation::Above, 9_999.0),
    ])
}

fn row_sum_error(t: &Tensor<f64>) -> f64 {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn loss(rng: &mut RngState) -> Result<Vec<Check>> {
    let labels = [0, 2, 9, 4, 4, 7];
    let hard = one_hot::<f64>(&labels, 10)?;
    let mut worst_sum = 0.0f64;
    let mut worst_grad_sum = 0.0f64;
    for eps in [0.0, 0.1, 0.3, 0.9] {
        worst_sum = worst_sum.max(row_sum_error(&smooth_targets(&hard, eps)?));
        let z = Tensor::randn(&[labels.len(), 10], 3.0, rng);
        let (_, g) = label_smooth_ce(&z, &labels, eps)?;
        let gsum = g
            .data()
            .chunks(10)
            .map(|r| r.iter().sum::<f64>().abs())
            .fold(0.0, f64::max);
        worst_grad_sum = worst_grad_sum.max(gsum);
    }
    let uniform = Tensor::<f64>::full(&[3, 7], 0.5);
    let (l, _) = label_smooth_ce(&uniform, &[0, 1, 6], 0.1)?;
    Ok(vec![
        Check::new(
            Suite::Loss,
            "smoothed targets max|row sum - 1|",
            worst_sum,
            Relation::Below,
            1e-12,
        ),
        Check::new(
            Suite::Loss,
            "CE gradient max|row sum|",
            worst_grad_sum,
            Relation::Below,
            1e-12,
        ),
        Check::new(
            Suite::Loss,
            "uniform logits |loss - ln K|",
            (l - 7f64.ln()).abs(),
            Relation::Below,
            1e-12,
        ),
    ])
}

/// Distance of `v` outside the interval spanned by `a` and `b`.
fn outside(v: f64, a: f64, b: f64) -> f64 {
    (a.min(b) - v).max(v - a.max(b)).max(0.0)
}

fn recipe(rng: &mut RngState) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let x = Tensor::randn(&[6, 3, 4, 4], 1.0, rng);
    let labels = [0, 1, 2, 3, 4, 0];
    let y = smooth_targets(&one_hot::<f64>(&labels, 5)?, 0.1)?;
    let lambdas = sample_lambdas(6, 0.2, rng)?;
    let (mx, my) = mixup_with_lambdas(&x, &y, &lambdas)?;
    let convex = |src: &Tensor<f64>, mixed: &Tensor<f64>| {
        let n = src.shape()[0];
        let inner = src.numel() / n;
        let (s, m) = (src.data(), mixed.data());
        let mut worst = 0.0f64;
        for i in 0..n {
            let j = n - 1 - i;
            for e in 0..inner {
                worst = worst.max(outside(m[i * inner + e], s[i * inner + e], s[j * inner + e]));
            }
        }
        worst
    };
    out.push(Check::new(
        Suite::Recipe,
        "mixup inputs outside pair range",
        convex(&x, &mx),
        Relation::AtMost,
        0.0,
    ));
    out.push(Check::new(
        Suite::Recipe,
        "mixup targets outside pair range",
        convex(&y, &my),
        Relation::AtMost,
        0.0,
    ));
    out.push(Check::new(
        Suite::Recipe,
        "mixed targets max|row sum - 1|",
        row_sum_error(&my),
        Relation::Below,
        1e-12,
    ));

    let mut worst = 0.0f64;
    for radix in [0, 1, 2] {
        let mut net = Network::<f64>::new(&NetworkConfig::micro(radix), rng)?;
        let mut bypass = net.clone();
        let x = Tensor::randn(&[2, 3, 32, 32], 1.0, rng);
        let full = net.forward(&x, &mut Ctx::new(Mode::Train, &mut RngState::new(1)))?;
        let short = bypass.forward_shortcut_only(&x, &mut Ctx::new(Mode::Train, &mut RngState::new(1)))?;
        worst = worst.max(full.max_abs_diff(&short)?);
    }
    out.push(Check::new(
        Suite::Recipe,
        "zero-gamma start vs shortcut-only max|diff|",
        worst,
        Relation::Below,
        1e-10,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::EACH.into_iter().chain([Suite::All]) {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        let e = "gradients".parse::<Suite>().unwrap_err();
        assert!(e.to_string().contains("gradients"), "{e}");
    }

    #[test]
    fn nan_fails_every_relation() {
        for rel in [Relation::Below, Relation::AtMost, Relation::Above] {
            assert!(!Check::new(Suite::Loss, "x", f64::NAN, rel, 1.0).passed());
        }
    }

    #[test]
    fn clean_build_passes_cheap_suites() {
        for s in [Suite::Equivalence, Suite::Attention, Suite::Schedule, Suite::Loss] {
            let r = run(s, &Options::default()).unwrap();
            assert!(r.passed(), "{r}");
        }
        let r = run(Suite::Equivalence, &Options::default()).unwrap();
        assert_eq!(r.checks.len(), 27);
    }

    #[test]
    fn planted_sign_flip_is_caught() {
        let opts = Options {
            seed: 0,
            fault: Fault::FlipFuseSign,
        };
        let eq = run(Suite::Equivalence, &opts).unwrap();
        assert!(!eq.passed());
        assert_eq!(eq.failures().count(), 27);
        let att = run(Suite::Attention, &opts).unwrap();
        assert!(att.failures().any(|c| c.name.contains("squeeze-and-gate")));
    }
}
