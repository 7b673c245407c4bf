//! Wall-clock forward timing. Numbers are machine-dependent.

use std::fmt;
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Ctx, Module};
use crate::ops::Mode;
use crate::rng::RngState;
use crate::splat::{
    forward_cardinality_major, forward_radix_major, permute_params, Direction, SplatConfig, SplatParams,
};
use crate::tensor::{Scalar, Tensor};

/// SHA-256 over shape extents and little-endian values, as lowercase hex.
pub fn tensor_hash<T: Scalar>(t: &Tensor<T>) -> String {
    let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size() + 32);
    for &e in t.shape() {
        bytes.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchStats {
    pub batch: usize,
    pub reps: usize,
    pub warmup: usize,
    pub min_ms: f64,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub logits_hash: String,
    /// Every timed repetition produced the same output bits.
    pub deterministic: bool,
}

impl BenchStats {
    pub fn per_image_ms(&self) -> f64 {
        self.median_ms / self.batch as f64
    }
}

impl fmt::Display for BenchStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "reps {} warmup {} batch {}", self.reps, self.warmup, self.batch)?;
        writeln!(
            f,
            "min {:.3} ms  median {:.3} ms  mean {:.3} ms  per-image {:.3} ms (machine-dependent)",
            self.min_ms,
            self.median_ms,
            self.mean_ms,
            self.per_image_ms()
        )?;
        writeln!(f, "deterministic: {}", self.deterministic)?;
        write!(f, "logits sha256: {}", self.logits_hash)
    }
}

fn summarize(mut times: Vec<f64>) -> (f64, f64, f64) {
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    };
    (times[0], median, times.iter().sum::<f64>() / n as f64)
}

/// Times eval-mode forwards of `model` on a seeded Gaussian batch.
pub fn bench_forward<T: Scalar, M: Module<T> + ?Sized>(
    model: &mut M,
    batch_shape: [usize; 4],
    reps: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchStats> {
    if reps == 0 {
        return Err(Error::config("bench: at least one repetition is required"));
    }
    let mut rng = RngState::new(seed);
    let x = Tensor::<T>::randn(&batch_shape, 1.0, &mut rng);
    let mut run = |rng: &mut RngState| model.forward(&x, &mut Ctx::new(Mode::Eval, rng));
    for _ in 0..warmup {
        run(&mut rng)?;
    }
    let mut times = Vec::with_capacity(reps);
    let mut first: Option<Tensor<T>> = None;
    let mut deterministic = true;
    for _ in 0..reps {
        let t = Instant::now();
        let y = run(&mut rng)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        match &first {
            None => first = Some(y),
            Some(f) => deterministic &= f.data() == y.data(),
        }
    }
    let (min_ms, median_ms, mean_ms) = summarize(times);
    Ok(BenchStats {
        batch: batch_shape[0],
        reps,
        warmup,
        min_ms,
        median_ms,
        mean_ms,
        logits_hash: tensor_hash(first.as_ref().expect("reps > 0")),
        deterministic,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutTiming {
    pub radix_major_ms: f64,
    pub cardinality_major_ms: f64,
}

impl LayoutTiming {
    pub fn slowdown(&self) -> f64 {
        self.radix_major_ms / self.cardinality_major_ms
    }
}

/// Median eval-mode time of the two layouts of one unit on the same data.
pub fn bench_layouts(cfg: &SplatConfig, input: [usize; 4], reps: usize, seed: u64) -> Result<LayoutTiming> {
    if reps == 0 {
        return Err(Error::config("bench: at least one repetition is required"));
    }
    let mut rng = RngState::new(seed);
    let params = SplatParams::<f64>::random(cfg, &mut rng);
    let card = permute_params(&params, cfg, Direction::RadixToCardinality)?;
    let x = Tensor::<f64>::randn(&input, 1.0, &mut rng);
    let time = |f: &mut dyn FnMut() -> Result<Tensor<f64>>| -> Result<f64> {
        let mut t = Vec::with_capacity(reps);
        f()?;
        for _ in 0..reps {
            let s = Instant::now();
            f()?;
            t.push(s.elapsed().as_secs_f64() * 1e3);
        }
        Ok(summarize(t).1)
    };
    let radix_major_ms = time(&mut || forward_radix_major(&x, cfg, &params, Mode::Eval))?;
    let cardinality_major_ms = time(&mut || forward_cardinality_major(&x, cfg, &card, Mode::Eval))?;
    Ok(LayoutTiming {
        radix_major_ms,
        cardinality_major_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Network, NetworkConfig};

    #[test]
    fn zero_reps_is_rejected() {
        let mut net = Network::<f64>::new(&NetworkConfig::micro(2), &mut RngState::new(0)).unwrap();
        let e = bench_forward(&mut net, [1, 3, 32, 32], 0, 0, 0).unwrap_err();
        assert!(e.to_string().contains("at least one repetition"), "{e}");
    }

    #[test]
    fn repeated_forwards_are_identical() {
        let mut net = Network::<f32>::new(&NetworkConfig::micro(2), &mut RngState::new(0)).unwrap();
        let a = bench_forward(&mut net, [2, 3, 32, 32], 3, 1, 9).unwrap();
        let b = bench_forward(&mut net, [2, 3, 32, 32], 2, 0, 9).unwrap();
        assert!(a.deterministic);
        assert_eq!(a.logits_hash, b.logits_hash);
        assert_eq!(a.logits_hash.len(), 64);
    }

    #[test]
    fn hash_depends_on_shape() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 2]);
        assert_ne!(tensor_hash(&a), tensor_hash(&b));
    }
}
