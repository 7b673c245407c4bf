//! Batch normalisation over `(N, H, W)` per channel, for rank-2 and rank-4 inputs.

use super::Mode;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Running mean and (unbiased) variance tracked during training.
///
/// Fresh statistics are mean 0 and variance 1, so evaluating a network that
/// has never seen a training batch normalises with the identity transform.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Scalar> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Normalises with batch statistics (train) or running statistics (eval),
/// then applies `gamma * x_hat + beta`. In train mode the running statistics
/// are updated as `(1 - momentum) * running + momentum * batch`.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, inner) = input.channel_view("batch_norm")?;
    gamma.expect_shape(&[c], "batch_norm gamma")?;
    beta.expect_shape(&[c], "batch_norm beta")?;
    running.mean.expect_shape(&[c], "batch_norm running mean")?;
    let x = input.data();
    let m = n * inner;
    let eps = T::of(eps);

    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        Mode::Train => {
            let inv_m = T::one() / T::of(m as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    s += x[(b * c + ch) * inner..][..inner].iter().copied().sum::<T>();
                }
                let mu = s * inv_m;
                let mut q = T::zero();
                for b in 0..n {
                    for &v in &x[(b * c + ch) * inner..][..inner] {
                        let d = v - mu;
                        q += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = q * inv_m;
            }
            let mom = T::of(momentum);
            let unbias = if m > 1 {
                T::of(m as f64 / (m as f64 - 1.0))
            } else {
                T::one()
            };
            for ch in 0..c {
                let rm = &mut running.mean.data_mut()[ch];
                *rm = (T::one() - mom) * *rm + mom * mean[ch];
                let rv = &mut running.var.data_mut()[ch];
                *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (running.mean.data().to_vec(), running.var.data().to_vec()),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let (g, bt) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = xh;
                out[i] = g[ch] * xh + bt[ch];
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), out)?,
        BatchNormCache {
            x_hat: Tensor::new(input.shape(), x_hat)?,
            inv_std,
            mode,
        },
    ))
}

pub fn batch_norm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    grad_out.expect_same_shape(&cache.x_hat, "batch_norm_backward")?;
    let (n, c, inner) = grad_out.channel_view("batch_norm_backward")?;
    let m = n * inner;
    let go = grad_out.data();
    let xh = cache.x_hat.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                dbeta[ch] += go[i];
                dgamma[ch] += go[i] * xh[i];
            }
        }
    }
    let mut dx = vec![T::zero(); go.len()];
    let g = gamma.data();
    match cache.mode {
        Mode::Train => {
            let mf = T::of(m as f64);
            for b in 0..n {
                for ch in 0..c {
                    let k = g[ch] * cache.inv_std[ch] / mf;
                    let off = (b * c + ch) * inner;
                    for i in off..off + inner {
                        dx[i] = k * (mf * go[i] - dbeta[ch] - xh[i] * dgamma[ch]);
                    }
                }
            }
        }
        Mode::Eval => {
            for b in 0..n {
                for ch in 0..c {
                    let k = g[ch] * cache.inv_std[ch];
                    let off = (b * c + ch) * inner;
                    for i in off..off + inner {
                        dx[i] = k * go[i];
                    }
                }
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(grad_out.shape(), dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    const EPS: f64 = 1e-5;

    #[test]
    fn train_mode_standardises() {
        let mut rng = RngState::new(5);
        let x = Tensor::<f64>::randn(&[4, 3, 5, 5], 2.0, &mut rng).map(|v| v + 3.0);
        let mut rs = RunningStats::new(3);
        let (y, _) = batch_norm(
            &x,
            &Tensor::ones(&[3]),
            &Tensor::zeros(&[3]),
            &mut rs,
            Mode::Train,
            0.1,
            EPS,
        )
        .unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.data()[(b * 3 + ch) * 25..][..25].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 100.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut rng = RngState::new(6);
        let x = Tensor::<f64>::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let beta = Tensor::new(&[2], vec![0.5, -1.5]).unwrap();
        let mut rs = RunningStats::new(2);
        let (y, _) = batch_norm(&x, &Tensor::zeros(&[2]), &beta, &mut rs, Mode::Train, 0.1, EPS).unwrap();
        for b in 0..2 {
            for ch in 0..2 {
                assert!(y.data()[(b * 2 + ch) * 9..][..9].iter().all(|&v| v == beta.data()[ch]));
            }
        }
    }

    #[test]
    fn matches_two_pass_oracle_and_updates_running_stats() {
        let mut rng = RngState::new(7);
        let x = Tensor::<f64>::randn(&[3, 2, 2, 3], 1.0, &mut rng);
        let gamma = Tensor::randn(&[2], 1.0, &mut rng);
        let beta = Tensor::randn(&[2], 1.0, &mut rng);
        let mut rs = RunningStats::new(2);
        let (y, _) = batch_norm(&x, &gamma, &beta, &mut rs, Mode::Train, 0.1, EPS).unwrap();
        for ch in 0..2 {
            let idx: Vec<usize> = (0..3).flat_map(|b| (0..6).map(move |i| (b * 2 + ch) * 6 + i)).collect();
            let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / 18.0;
            let var = idx.iter().map(|&i| (x.data()[i] - mean).powi(2)).sum::<f64>() / 18.0;
            for &i in &idx {
                let want = gamma.data()[ch] * (x.data()[i] - mean) / (var + EPS).sqrt() + beta.data()[ch];
                assert!((y.data()[i] - want).abs() < 1e-10);
            }
            assert!((rs.mean.data()[ch] - 0.1 * mean).abs() < 1e-12);
            assert!((rs.var.data()[ch] - (0.9 + 0.1 * var * 18.0 / 17.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_before_training_uses_identity_stats() {
        let mut rng = RngState::new(8);
        let x = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let mut rs = RunningStats::new(3);
        let (y, _) = batch_norm(
            &x,
            &Tensor::ones(&[3]),
            &Tensor::zeros(&[3]),
            &mut rs,
            Mode::Eval,
            0.1,
            0.0,
        )
        .unwrap();
        assert_eq!(y, x);
        assert_eq!(rs, RunningStats::new(3));
    }
}
