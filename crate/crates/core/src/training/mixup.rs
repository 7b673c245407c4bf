//! Mixup: each sample is blended with its mirror in the batch.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixupConfig {
    pub alpha: f64,
    pub enabled: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            alpha: 0.2,
            enabled: false,
        }
    }
}

/// Draws one `lambda ~ Beta(alpha, alpha)` per sample.
pub fn sample_lambdas(n: usize, alpha: f64, rng: &mut RngState) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("mixup: alpha {alpha} must be positive")));
    }
    Ok((0..n).map(|_| rng.beta(alpha, alpha)).collect())
}

/// `x_hat[n] = l[n] x[n] + (1 - l[n]) x[N - 1 - n]`, and likewise for targets.
pub fn mixup_with_lambdas<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, lambdas: &[f64]) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = x.shape()[0];
    if y.shape()[0] != n || lambdas.len() != n {
        return Err(Error::shape(
            "mixup",
            format!("batch {n}, targets {}, lambdas {}", y.shape()[0], lambdas.len()),
        ));
    }
    let mix = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let inner = t.numel() / n;
        let src = t.data();
        let mut out = Vec::with_capacity(t.numel());
        for (i, &l) in lambdas.iter().enumerate() {
            let j = n - 1 - i;
            let near_a = l >= 0.5;
            let (l, r) = (T::of(l), T::of(1.0 - l));
            // Stepping from the nearer endpoint is exact at l = 0, l = 1 and
            // a == b; the clamp undoes rounding past [min(a, b), max(a, b)].
            out.extend(
                src[i * inner..][..inner]
                    .iter()
                    .zip(&src[j * inner..][..inner])
                    .map(|(&a, &b)| {
                        let v = if near_a { a + r * (b - a) } else { b + l * (a - b) };
                        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                        if v < lo {
                            lo
                        } else if v > hi {
                            hi
                        } else {
                            v
                        }
                    }),
            );
        }
        Tensor::new(t.shape(), out)
    };
    Ok((mix(x)?, mix(y)?))
}

/// Samples per-example mixing weights and applies them. Returns the mixed
/// batch, the mixed targets and the weights used.
pub fn mixup_batch<T: Scalar>(
    x: &Tensor<T>,
    y_onehot: &Tensor<T>,
    alpha: f64,
    rng: &mut RngState,
) -> Result<(Tensor<T>, Tensor<T>, Vec<f64>)> {
    let lambdas = sample_lambdas(x.shape()[0], alpha, rng)?;
    let (xm, ym) = mixup_with_lambdas(x, y_onehot, &lambdas)?;
    Ok((xm, ym, lambdas))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::loss::one_hot;

    fn batch() -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = RngState::new(1);
        (
            Tensor::randn(&[4, 2, 3, 3], 1.0, &mut rng),
            one_hot(&[0, 1, 2, 1], 3).unwrap(),
        )
    }

    #[test]
    fn lambda_one_is_identity() {
        let (x, y) = batch();
        let (xm, ym) = mixup_with_lambdas(&x, &y, &[1.0; 4]).unwrap();
        assert_eq!((xm, ym), (x, y));
    }

    #[test]
    fn lambda_zero_reverses() {
        let (x, y) = batch();
        let (xm, _) = mixup_with_lambdas(&x, &y, &[0.0; 4]).unwrap();
        for i in 0..4 {
            assert_eq!(xm.sample(i).unwrap(), x.sample(3 - i).unwrap());
        }
    }

    #[test]
    fn mixed_targets_sum_to_one() {
        let (x, y) = batch();
        let mut rng = RngState::new(2);
        let (_, ym, l) = mixup_batch(&x, &y, 0.2, &mut rng).unwrap();
        assert!(l.iter().all(|v| (0.0..=1.0).contains(v)));
        for r in 0..4 {
            assert!((ym.data()[r * 3..][..3].iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_non_positive_alpha() {
        let (x, y) = batch();
        let mut rng = RngState::new(3);
        assert!(mixup_batch(&x, &y, 0.0, &mut rng).is_err());
        assert!(mixup_batch(&x, &y, -1.0, &mut rng).is_err());
    }
}
