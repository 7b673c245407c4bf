//! Seeded two-class image set: oriented bars (label 0) against checkerboards
//! (label 1), both under additive Gaussian noise.
//!
//! Every image is `3 x size x size`. A bar image is a square wave along one
//! of four orientations (0°, 45°, 90°, 135°) with a random period in
//! `[4, 8)` and random phase. A checkerboard has an integer cell size in
//! `2..=5` and a random offset. Both get a random amplitude in `[0.5, 1]`,
//! per-channel gains in `[0.5, 1]`, then `N(0, noise²)` per pixel. Labels
//! alternate so the classes are balanced.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar = f64> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let parts = indices
            .iter()
            .map(|&i| self.images.sample(i))
            .collect::<Result<Vec<_>>>()?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::stack_samples(&parts)?, labels))
    }
}

fn bars(size: usize, rng: &mut RngState) -> Vec<f64> {
    let theta = rng.below(4) as f64 * PI / 4.0;
    let period = 4.0 + 4.0 * rng.uniform();
    let phase = 2.0 * PI * rng.uniform();
    let (c, s) = (theta.cos(), theta.sin());
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let t = 2.0 * PI * (x as f64 * c + y as f64 * s) / period + phase;
            img.push(if t.sin() >= 0.0 { 1.0 } else { -1.0 });
        }
    }
    img
}

fn checkerboard(size: usize, rng: &mut RngState) -> Vec<f64> {
    let cell = 2 + rng.below(4);
    let (ox, oy) = (rng.below(cell), rng.below(cell));
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let parity = ((x + ox) / cell + (y + oy) / cell) % 2;
            img.push(if parity == 0 { 1.0 } else { -1.0 });
        }
    }
    img
}

pub fn synthetic_patterns<T: Scalar>(samples: usize, size: usize, noise: f64, seed: u64) -> Result<Dataset<T>> {
    if samples < 2 {
        return Err(Error::config("dataset: need at least two samples"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config(format!("dataset: noise {noise} must be non-negative")));
    }
    let mut rng = RngState::new(seed);
    let plane = size * size;
    let mut data = Vec::with_capacity(samples * 3 * plane);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % 2;
        let pattern = if label == 0 {
            bars(size, &mut rng)
        } else {
            checkerboard(size, &mut rng)
        };
        let amp = 0.5 + 0.5 * rng.uniform();
        for _ in 0..3 {
            let gain = amp * (0.5 + 0.5 * rng.uniform());
            data.extend(pattern.iter().map(|&v| T::of(gain * v + noise * rng.normal())));
        }
        labels.push(label);
    }
    Ok(Dataset {
        images: Tensor::new(&[samples, 3, size, size], data)?,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_balanced() {
        let a = synthetic_patterns::<f64>(10, 32, 0.5, 4).unwrap();
        let b = synthetic_patterns::<f64>(10, 32, 0.5, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images.shape(), &[10, 3, 32, 32]);
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 5);
        let c = synthetic_patterns::<f64>(10, 32, 0.5, 5).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn noiseless_patterns_are_two_level_per_channel() {
        let d = synthetic_patterns::<f64>(4, 16, 0.0, 1).unwrap();
        for ch in d.images.data().chunks(256) {
            let hi = ch.iter().cloned().fold(f64::MIN, f64::max);
            assert!(ch.iter().all(|&v| v == hi || v == -hi));
        }
    }

    #[test]
    fn batch_gathers_requested_samples() {
        let d = synthetic_patterns::<f64>(6, 8, 0.1, 2).unwrap();
        let (x, y) = d.batch(&[5, 0]).unwrap();
        assert_eq!(y, vec![1, 0]);
        assert_eq!(x.sample(0).unwrap(), d.images.sample(5).unwrap());
    }
}
