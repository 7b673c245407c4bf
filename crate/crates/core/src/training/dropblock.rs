//! DropBlock masks: contiguous squares of a feature map are zeroed together.

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// Seed rate `drop_prob * H W / (b^2 (H - b + 1)(W - b + 1))`, chosen so the
/// expected dropped fraction is close to `drop_prob`.
pub fn dropblock_gamma(h: usize, w: usize, block_size: usize, drop_prob: f64) -> f64 {
    let b = block_size as f64;
    drop_prob * (h * w) as f64 / (b * b * (h - block_size + 1) as f64 * (w - block_size + 1) as f64)
}

/// Builds a multiplicative mask for an `[N, C, H, W]` activation.
///
/// Each feature map draws Bernoulli(`gamma`) seeds at the positions where a
/// full `block_size x block_size` square fits; every seed zeroes the square
/// centred on it (clipped to the map). Survivors are rescaled by
/// `total / kept` over the whole tensor. Eval mode or `drop_prob = 0` gives an
/// all-ones mask without consuming randomness.
pub fn dropblock_mask<T: Scalar>(
    shape: &[usize],
    block_size: usize,
    drop_prob: f64,
    rng: &mut RngState,
    mode: Mode,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = shape[..] else {
        return Err(Error::shape("dropblock", format!("expected NCHW, got {shape:?}")));
    };
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::config(format!(
            "dropblock: drop_prob {drop_prob} must lie in [0, 1)"
        )));
    }
    if block_size == 0 || block_size % 2 == 0 {
        return Err(Error::config(format!("dropblock: block_size {block_size} must be odd")));
    }
    if block_size > h.min(w) {
        return Err(Error::config(format!(
            "dropblock: block_size {block_size} exceeds feature map {h}x{w}"
        )));
    }
    if mode == Mode::Eval || drop_prob == 0.0 {
        return Ok(Tensor::ones(shape));
    }
    let gamma = dropblock_gamma(h, w, block_size, drop_prob);
    let half = block_size / 2;
    let mut keep = vec![true; n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for cy in half..h - half {
            for cx in half..w - half {
                if !rng.bernoulli(gamma) {
                    continue;
                }
                for y in cy.saturating_sub(half)..(cy + half + 1).min(h) {
                    for x in cx.saturating_sub(half)..(cx + half + 1).min(w) {
                        keep[base + y * w + x] = false;
                    }
                }
            }
        }
    }
    let kept = keep.iter().filter(|&&k| k).count();
    let scale = if kept == 0 {
        T::zero()
    } else {
        T::of(keep.len() as f64 / kept as f64)
    };
    Tensor::new(
        shape,
        keep.into_iter().map(|k| if k { scale } else { T::zero() }).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_probability_is_all_ones() {
        let mut rng = RngState::new(1);
        let m: Tensor<f64> = dropblock_mask(&[2, 3, 8, 8], 3, 0.0, &mut rng, Mode::Train).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
        let m: Tensor<f64> = dropblock_mask(&[2, 3, 8, 8], 3, 0.5, &mut rng, Mode::Eval).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn block_size_validation() {
        let mut rng = RngState::new(2);
        assert!(dropblock_mask::<f64>(&[1, 1, 4, 4], 5, 0.1, &mut rng, Mode::Train).is_err());
        assert!(dropblock_mask::<f64>(&[1, 1, 4, 4], 2, 0.1, &mut rng, Mode::Train).is_err());
    }

    #[test]
    fn dropped_squares_are_contiguous() {
        let mut rng = RngState::new(3);
        let m: Tensor<f64> = dropblock_mask(&[1, 1, 9, 9], 3, 0.05, &mut rng, Mode::Train).unwrap();
        // Every zero belongs to some fully-zero 3x3 square.
        let z = |y: usize, x: usize| m.data()[y * 9 + x] == 0.0;
        for y in 0..9 {
            for x in 0..9 {
                if !z(y, x) {
                    continue;
                }
                let covered = (1..8usize).any(|cy| {
                    (1..8usize).any(|cx| {
                        cy.abs_diff(y) <= 1
                            && cx.abs_diff(x) <= 1
                            && (cy - 1..=cy + 1).all(|yy| (cx - 1..=cx + 1).all(|xx| z(yy, xx)))
                    })
                });
                assert!(covered, "isolated zero at {y},{x}");
            }
        }
    }

    #[test]
    fn block_size_one_behaves_like_dropout() {
        let mut rng = RngState::new(4);
        let m: Tensor<f64> = dropblock_mask(&[16, 16, 16, 16], 1, 0.2, &mut rng, Mode::Train).unwrap();
        let dropped = m.data().iter().filter(|&&v| v == 0.0).count() as f64 / m.numel() as f64;
        assert!((dropped - 0.2).abs() < 0.01, "{dropped}");
    }
}
