//! Cross-entropy against smoothed (and possibly mixed) target distributions.

use crate::error::{Error, Result};
use crate::ops::softmax;
use crate::tensor::{Scalar, Tensor};

/// Smoothing parameters: the true class keeps `1 - eps`, every other class gets
/// `eps / (K - 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub smoothing: f64,
    pub num_classes: usize,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config(format!(
                "label smoothing {} must lie in [0, 1)",
                self.smoothing
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::config("label smoothing needs at least two classes"));
        }
        Ok(())
    }
}

pub fn one_hot<T: Scalar>(labels: &[usize], num_classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len().max(1), num_classes]);
    if labels.is_empty() {
        return Err(Error::config("one_hot: empty label list"));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::config(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        t.data_mut()[i * num_classes + l] = T::one();
    }
    Ok(t)
}

/// Applies smoothing to a target distribution row-wise:
/// `p = (1 - eps) y + eps / (K - 1) (1 - y)`.
///
/// The map is affine, so smoothing a mixed target equals mixing smoothed
/// targets; rows summing to one keep summing to one.
pub fn smooth_targets<T: Scalar>(targets: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let (_, k) = targets.dims2("smooth_targets")?;
    if k < 2 {
        return Err(Error::config("smooth_targets: need at least two classes"));
    }
    let keep = T::of(1.0 - eps);
    let spread = T::of(eps / (k as f64 - 1.0));
    Ok(targets.map(|y| keep * y + spread * (T::one() - y)))
}

/// Mean over the batch of `-sum_i p_i log q_i` with `q = softmax(logits)`.
/// Returns the loss and its gradient with respect to the logits,
/// `(q - p) / N`.
pub fn soft_target_ce<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (n, k) = logits.dims2("cross_entropy")?;
    targets.expect_shape(&[n, k], "cross_entropy targets")?;
    let z = logits.data();
    let mut loss = 0.0;
    for b in 0..n {
        let row = &z[b * k..][..k];
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        for (i, &zi) in row.iter().enumerate() {
            let p = targets.data()[b * k + i];
            if p != T::zero() {
                loss += (p * (lse - zi)).to_f64_lossy();
            }
        }
    }
    let q = softmax(logits, 1)?;
    let inv_n = T::of(1.0 / n as f64);
    let grad = q.zip_map(targets, |qi, pi| (qi - pi) * inv_n)?;
    Ok((loss / n as f64, grad))
}

/// Label-smoothed cross entropy for hard labels.
pub fn label_smooth_ce<T: Scalar>(logits: &Tensor<T>, labels: &[usize], eps: f64) -> Result<(f64, Tensor<T>)> {
    let (n, k) = logits.dims2("label_smooth_ce")?;
    if labels.len() != n {
        return Err(Error::config(format!(
            "label_smooth_ce: {} labels for a batch of {n}",
            labels.len()
        )));
    }
    LossConfig {
        smoothing: eps,
        num_classes: k,
    }
    .validate()?;
    let targets = smooth_targets(&one_hot::<T>(labels, k)?, eps)?;
    soft_target_ce(logits, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn zero_smoothing_is_hard_cross_entropy() {
        let z = Tensor::new(&[1, 3], vec![0.3, -1.2, 2.0]).unwrap();
        let (l, _) = label_smooth_ce(&z, &[1], 0.0).unwrap();
        let lse = (0.3f64.exp() + (-1.2f64).exp() + 2.0f64.exp()).ln();
        assert!((l - (1.2 + lse)).abs() < 1e-14);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        for eps in [0.0, 0.1, 0.5] {
            let z = Tensor::<f64>::full(&[3, 7], 0.25);
            let (l, _) = label_smooth_ce(&z, &[0, 3, 6], eps).unwrap();
            assert!((l - 7f64.ln()).abs() < 1e-13);
        }
    }

    #[test]
    fn five_class_example() {
        let z = Tensor::new(&[1, 5], vec![2.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let (l, _) = label_smooth_ce(&z, &[0], 0.1).unwrap();
        let lse = (2f64.exp() + 4.0).ln();
        let expected = 0.9 * (lse - 2.0) + 4.0 * 0.025 * lse;
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let z = Tensor::<f64>::zeros(&[1, 3]);
        assert!(label_smooth_ce(&z, &[3], 0.1).is_err());
    }

    #[test]
    fn smoothed_rows_sum_to_one() {
        let mut rng = RngState::new(4);
        let y = Tensor::<f64>::uniform(&[4, 6], 0.0, 1.0, &mut rng);
        let y = {
            let mut y = y;
            for r in 0..4 {
                let s: f64 = y.data()[r * 6..][..6].iter().sum();
                y.data_mut()[r * 6..][..6].iter_mut().for_each(|v| *v /= s);
            }
            y
        };
        let p = smooth_targets(&y, 0.3).unwrap();
        for r in 0..4 {
            assert!((p.data()[r * 6..][..6].iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }
}
