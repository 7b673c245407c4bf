//! Deterministic desk-scale trainer on the synthetic pattern set.
//!
//! Randomness comes from forks of one root generator: stream 1 initialises
//! the network, stream 2 seeds the dataset and stream `100 + e` drives epoch
//! `e` (shuffling, mixup, dropout). An epoch therefore depends only on the
//! state at its start, which makes resuming from an epoch boundary exact.

use std::fmt::Write as _;

use super::data::{synthetic_patterns, Dataset};
use super::loss::{one_hot, smooth_targets, soft_target_ce, LossConfig};
use super::mixup::{mixup_batch, MixupConfig};
use super::optim::{OptimizerConfig, Sgd};
use super::schedule::{lr_at, ScheduleConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::network::parse_value;
use crate::network::{parse_kv, KvEntry, Network, NetworkConfig};
use crate::nn::{Ctx, Module};
use crate::ops::Mode;
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// Keys a training config accepts on top of the network keys.
pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch",
    "base_lr",
    "warmup_epochs",
    "mixup_alpha",
    "smoothing",
    "weight_decay",
    "momentum",
    "seed",
    "samples",
    "noise",
];

const IMAGE_SIZE: usize = 32;
const VELOCITY_PREFIX: &str = "opt.velocity.";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub epochs: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// Zero disables mixup.
    pub mixup_alpha: f64,
    pub smoothing: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub samples: usize,
    pub noise: f64,
}

impl TrainConfig {
    /// Micro network with the given radix and the frozen toy recipe.
    pub fn toy(radix: usize) -> Self {
        TrainConfig {
            network: NetworkConfig::micro(radix),
            epochs: 20,
            batch: 32,
            base_lr: 0.2,
            warmup_epochs: 2,
            mixup_alpha: 0.0,
            smoothing: 0.0,
            weight_decay: 1e-4,
            momentum: 0.9,
            seed: 0,
            samples: 256,
            noise: 1.0,
        }
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "base_lr" => self.base_lr = parse_value(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "mixup_alpha" => self.mixup_alpha = parse_value(key, value)?,
            "smoothing" => self.smoothing = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "samples" => self.samples = parse_value(key, value)?,
            "noise" => self.noise = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Starts from [`TrainConfig::toy`] (or the ResNeSt preset when `depth` is
    /// given) and applies the entries in order. Unknown keys are errors.
    pub fn from_entries(entries: &[KvEntry]) -> Result<Self> {
        let mut cfg = TrainConfig::toy(2);
        if let Some(e) = entries.iter().find(|e| e.key == "depth") {
            cfg.network = NetworkConfig::resnest(parse_value(&e.key, &e.value)?)?;
        }
        for e in entries.iter().filter(|e| e.key != "depth") {
            if !cfg.network.apply(&e.key, &e.value)? && !cfg.apply(&e.key, &e.value)? {
                return Err(Error::Config(format!("unknown key {:?} on line {}", e.key, e.line)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        Self::from_entries(&parse_kv(text)?)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples / self.batch.max(1)
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.base_lr,
            batch_size: self.batch,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch(),
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn mixup(&self) -> MixupConfig {
        MixupConfig {
            alpha: if self.mixup_alpha > 0.0 { self.mixup_alpha } else { 0.2 },
            enabled: self.mixup_alpha > 0.0,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            smoothing: self.smoothing,
            num_classes: self.network.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.network.num_classes != 2 || self.network.input_channels != 3 {
            return Err(Error::config(
                "train: the synthetic task needs classes = 2 and input_channels = 3",
            ));
        }
        if self.batch < 2 || self.samples < self.batch {
            return Err(Error::config(format!(
                "train: batch {} must be at least 2 and at most samples {}",
                self.batch, self.samples
            )));
        }
        if self.mixup_alpha < 0.0 || !self.mixup_alpha.is_finite() {
            return Err(Error::config(format!(
                "train: mixup_alpha {} must be >= 0",
                self.mixup_alpha
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                "train: momentum must lie in [0, 1) and weight_decay be >= 0",
            ));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config(format!("train: noise {} must be >= 0", self.noise)));
        }
        self.loss().validate()?;
        self.schedule().validate()
    }

    /// `key = value` lines accepted by [`TrainConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        format!(
            "{}epochs = {}\nbatch = {}\nbase_lr = {}\nwarmup_epochs = {}\nmixup_alpha = {}\nsmoothing = {}\n\
             weight_decay = {}\nmomentum = {}\nseed = {}\nsamples = {}\nnoise = {}\n",
            self.network.to_kv(),
            self.epochs,
            self.batch,
            self.base_lr,
            self.warmup_epochs,
            self.mixup_alpha,
            self.smoothing,
            self.weight_decay,
            self.momentum,
            self.seed,
            self.samples,
            self.noise
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    /// Eval-mode accuracy on the whole training set after the epoch.
    pub accuracy: f64,
    /// Rate used by the epoch's last step.
    pub lr: f64,
}

impl EpochMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.8}\t{:.6}\t{:.8e}",
            self.epoch, self.loss, self.accuracy, self.lr
        )
    }
}

pub struct Trainer<T: Scalar = f64> {
    pub cfg: TrainConfig,
    pub net: Network<T>,
    pub opt: Sgd<T>,
    data: Dataset<T>,
    root: RngState,
    history: Vec<EpochMetrics>,
    lr_trace: Vec<f64>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let root = RngState::new(cfg.seed);
        let net = Network::new(&cfg.network, &mut root.fork(1))?;
        let data = synthetic_patterns(cfg.samples, IMAGE_SIZE, cfg.noise, root.fork(2).next_u64())?;
        Ok(Trainer {
            opt: Sgd::new(cfg.optimizer()),
            cfg,
            net,
            data,
            root,
            history: Vec::new(),
            lr_trace: Vec::new(),
        })
    }

    pub fn dataset(&self) -> &Dataset<T> {
        &self.data
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    /// Learning rate of every step taken so far, in order.
    pub fn lr_trace(&self) -> &[f64] {
        &self.lr_trace
    }

    /// One optimisation step on a batch; returns the loss.
    fn step(&mut self, step: usize, indices: &[usize], rng: &mut RngState) -> Result<f64> {
        let (x, labels) = self.data.batch(indices)?;
        let mut y = one_hot::<T>(&labels, self.cfg.network.num_classes)?;
        let mut x = x;
        let mix = self.cfg.mixup();
        if mix.enabled {
            let (xm, ym, _) = mixup_batch(&x, &y, mix.alpha, rng)?;
            x = xm;
            y = ym;
        }
        if self.cfg.smoothing > 0.0 {
            y = smooth_targets(&y, self.cfg.smoothing)?;
        }
        let lr = lr_at(step, &self.cfg.schedule())?;
        let logits = self.net.forward(&x, &mut Ctx::new(Mode::Train, rng))?;
        let (loss, grad) = soft_target_ce(&logits, &y)?;
        if !loss.is_finite() || !logits.all_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {loss} at learning rate {lr:e}"),
            });
        }
        self.net.zero_grad();
        self.net.backward(&grad)?;
        self.opt.step(&mut self.net, lr)?;
        self.lr_trace.push(lr);
        Ok(loss)
    }

    /// Fraction of the training set classified correctly in eval mode.
    pub fn accuracy(&mut self) -> Result<f64> {
        let n = self.data.len();
        let mut correct = 0usize;
        let mut rng = self.root.fork(3);
        let order: Vec<usize> = (0..n).collect();
        for chunk in order.chunks(self.cfg.batch) {
            let (x, labels) = self.data.batch(chunk)?;
            let logits = self.net.forward(&x, &mut Ctx::new(Mode::Eval, &mut rng))?;
            let k = logits.shape()[1];
            for (row, &label) in logits.data().chunks(k).zip(&labels) {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                correct += usize::from(best == label);
            }
        }
        Ok(correct as f64 / n as f64)
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let e = self.epochs_done();
        if e >= self.cfg.epochs {
            return Err(Error::config(format!(
                "train: all {} epochs already done",
                self.cfg.epochs
            )));
        }
        let mut rng = self.root.fork(100 + e as u64);
        let order = rng.permutation(self.data.len());
        let spe = self.cfg.steps_per_epoch();
        let mut total = 0.0;
        for s in 0..spe {
            let indices = &order[s * self.cfg.batch..][..self.cfg.batch];
            total += self.step(e * spe + s, indices, &mut rng)?;
        }
        let metrics = EpochMetrics {
            epoch: e + 1,
            loss: total / spe as f64,
            accuracy: self.accuracy()?,
            lr: *self.lr_trace.last().expect("at least one step per epoch"),
        };
        self.history.push(metrics);
        Ok(metrics)
    }

    /// Runs until `stop_after` epochs are done (all epochs when `None`).
    pub fn run(&mut self, stop_after: Option<usize>) -> Result<&[EpochMetrics]> {
        let end = stop_after.unwrap_or(self.cfg.epochs).min(self.cfg.epochs);
        while self.epochs_done() < end {
            self.run_epoch()?;
        }
        Ok(&self.history)
    }

    pub fn log_header(&self) -> String {
        let c = &self.cfg;
        format!(
            "# seed {}\n# network {}\n# epochs {} batch {} base_lr {} warmup_epochs {} mixup_alpha {} smoothing {} \
             weight_decay {} momentum {} samples {} noise {} precision {:?}\nepoch\tloss\tacc\tlr\n",
            c.seed,
            c.network,
            c.epochs,
            c.batch,
            c.base_lr,
            c.warmup_epochs,
            c.mixup_alpha,
            c.smoothing,
            c.weight_decay,
            c.momentum,
            c.samples,
            c.noise,
            T::DTYPE
        )
    }

    /// Header plus one line per completed epoch.
    pub fn metric_log(&self) -> String {
        let mut s = self.log_header();
        for m in &self.history {
            let _ = writeln!(s, "{}", m.log_line());
        }
        s
    }

    /// Parameters, buffers, momentum buffers and the trainer's progress.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_module(&self.net);
        for (name, v) in self.opt.velocities() {
            ck.push(format!("{VELOCITY_PREFIX}{name}"), v);
        }
        let seed = self.cfg.seed;
        let state = [
            self.epochs_done() as f64,
            (seed >> 32) as f64,
            (seed & 0xffff_ffff) as f64,
        ];
        ck.push(
            "trainer.state",
            &Tensor::<f64>::new(&[3], state.to_vec()).expect("3 values"),
        );
        if !self.history.is_empty() {
            let flat = self
                .history
                .iter()
                .flat_map(|m| [m.epoch as f64, m.loss, m.accuracy, m.lr])
                .collect();
            let t = Tensor::<f64>::new(&[self.history.len(), 4], flat).expect("4 per epoch");
            ck.push("trainer.history", &t);
        }
        ck
    }

    /// Rebuilds a trainer for `cfg` and restores the state saved by
    /// [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg)?;
        ck.load_into(&mut t.net)?;
        for (name, stored) in &ck.entries {
            if let Some(param) = name.strip_prefix(VELOCITY_PREFIX) {
                t.opt.set_velocity(param, stored.to());
            }
        }
        let state: Tensor<f64> = ck
            .get("trainer.state")
            .ok_or_else(|| Error::Checkpoint("missing tensor trainer.state".into()))?
            .to();
        let s = state.data();
        if s.len() != 3 {
            return Err(Error::Checkpoint("trainer.state must hold three values".into()));
        }
        let seed = ((s[1] as u64) << 32) | s[2] as u64;
        if seed != t.cfg.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with seed {seed}, config has seed {}",
                t.cfg.seed
            )));
        }
        let done = s[0] as usize;
        if done > t.cfg.epochs {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {done} epochs, config only {}",
                t.cfg.epochs
            )));
        }
        if done > 0 {
            let h: Tensor<f64> = ck
                .get("trainer.history")
                .ok_or_else(|| Error::Checkpoint("missing tensor trainer.history".into()))?
                .to();
            if h.shape() != [done, 4] {
                return Err(Error::Checkpoint(format!("trainer.history has shape {:?}", h.shape())));
            }
            t.history = h
                .data()
                .chunks(4)
                .map(|r| EpochMetrics {
                    epoch: r[0] as usize,
                    loss: r[1],
                    accuracy: r[2],
                    lr: r[3],
                })
                .collect();
        }
        let schedule = t.cfg.schedule();
        t.lr_trace = (0..done * t.cfg.steps_per_epoch())
            .map(|s| lr_at(s, &schedule))
            .collect::<Result<_>>()?;
        Ok(t)
    }
}

/// Trains `cfg` from scratch to completion; returns the per-epoch metrics
/// and the learning rate of every step.
pub fn train_toy<T: Scalar>(cfg: TrainConfig) -> Result<(Vec<EpochMetrics>, Vec<f64>)> {
    let mut t = Trainer::<T>::new(cfg)?;
    t.run(None)?;
    Ok((t.history, t.lr_trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(radix: usize) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            samples: 16,
            batch: 8,
            ..TrainConfig::toy(radix)
        }
    }

    #[test]
    fn config_keys_and_defaults() {
        let c = TrainConfig::from_kv("radix = 0\nepochs = 4\nbase_lr = 0.4\n").unwrap();
        assert_eq!(c.network.radix, 0);
        assert_eq!((c.epochs, c.base_lr, c.seed), (4, 0.4, 0));
        let e = TrainConfig::from_kv("epohcs = 4\n").unwrap_err().to_string();
        assert!(e.contains("epohcs") && e.contains("line 1"), "{e}");
        let back = TrainConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn lr_trace_follows_the_schedule() {
        let cfg = tiny(2);
        let (hist, trace) = train_toy::<f64>(cfg.clone()).unwrap();
        assert_eq!(hist.len(), 3);
        let sched = cfg.schedule();
        assert_eq!(trace.len(), sched.total_steps());
        for (s, &lr) in trace.iter().enumerate() {
            assert_eq!(lr, lr_at(s, &sched).unwrap());
        }
    }

    #[test]
    fn plain_recipe_loss_is_hard_cross_entropy() {
        let mut t = Trainer::<f64>::new(tiny(1)).unwrap();
        let (x, labels) = t.dataset().batch(&[0, 1, 2, 3]).unwrap();
        let mut rng = RngState::new(0);
        let logits = t.net.forward(&x, &mut Ctx::new(Mode::Train, &mut rng)).unwrap();
        let y = one_hot::<f64>(&labels, 2).unwrap();
        let (a, _) = soft_target_ce(&logits, &y).unwrap();
        let (b, _) = super::super::loss::label_smooth_ce(&logits, &labels, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = tiny(2);
        let mut full = Trainer::<f64>::new(cfg.clone()).unwrap();
        full.run(None).unwrap();

        let mut first = Trainer::<f64>::new(cfg.clone()).unwrap();
        first.run(Some(1)).unwrap();
        let bytes = first.checkpoint().to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut second = Trainer::<f64>::resume(cfg, &ck).unwrap();
        second.run(None).unwrap();

        assert_eq!(full.metric_log(), second.metric_log());
        assert_eq!(
            full.checkpoint().to_bytes().unwrap(),
            second.checkpoint().to_bytes().unwrap()
        );
        assert_eq!(full.lr_trace(), second.lr_trace());
    }

    #[test]
    fn divergence_names_the_step() {
        let cfg = TrainConfig {
            base_lr: 1e300,
            ..tiny(0)
        };
        let err = train_toy::<f64>(cfg).unwrap_err();
        match err {
            Error::Diverged { step, .. } => assert!(step > 0, "diverged at {step}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn resume_rejects_other_seed() {
        let t = Trainer::<f64>::new(tiny(2)).unwrap();
        let ck = t.checkpoint();
        let other = TrainConfig { seed: 7, ..tiny(2) };
        assert!(Trainer::<f64>::resume(other, &ck).is_err());
    }
}
