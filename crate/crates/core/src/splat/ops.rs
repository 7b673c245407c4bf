//! Attention arithmetic on radix-major split tensors.
//!
//! `U` has `C·R` channels with split `r` of cardinal group `k` occupying
//! channels `r·C + k·C/K .. r·C + (k+1)·C/K`. Logits and weights are
//! `[N, K, R, C/K]`.

use crate::error::{Error, Result};
use crate::ops::{self, global_avg_pool};
use crate::tensor::{Scalar, Tensor};

/// Raw attention logits, `[N, K, R, C/K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitLogits<T: Scalar = f64>(pub Tensor<T>);

/// Attention weights `a_r^k(c)`, `[N, K, R, C/K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitWeights<T: Scalar = f64>(pub Tensor<T>);

impl<T: Scalar> SplitLogits<T> {
    /// Reinterprets an `[N, C·R]` attention-head output as `[N, K, R, C/K]`.
    pub fn from_head(out: &Tensor<T>, radix: usize, cardinality: usize) -> Result<Self> {
        let (n, f) = out.dims2("split_logits")?;
        if f % (radix * cardinality) != 0 {
            return Err(Error::shape(
                "split_logits",
                format!("{f} features not divisible by K·R = {}", radix * cardinality),
            ));
        }
        Ok(SplitLogits(out.reshape(&[
            n,
            cardinality,
            radix,
            f / (radix * cardinality),
        ])?))
    }

    pub fn radix(&self) -> usize {
        self.0.shape()[2]
    }
}

impl<T: Scalar> SplitWeights<T> {
    pub fn radix(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn cardinality(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn at(&self, n: usize, k: usize, r: usize, c: usize) -> T {
        let s = self.0.shape();
        self.0.data()[((n * s[1] + k) * s[2] + r) * s[3] + c]
    }
}

fn split_dims<T: Scalar>(u: &Tensor<T>, radix: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    let (n, cr, h, w) = u.dims4(op)?;
    if radix == 0 || cr % radix != 0 {
        return Err(Error::shape(
            op,
            format!("{cr} channels not divisible by radix {radix}"),
        ));
    }
    Ok((n, cr / radix, h * w))
}

/// `Û[j] = Σ_r U[r·C + j]`: the per-cardinal-group sum over splits.
pub fn cardinal_fuse<T: Scalar>(u: &Tensor<T>, radix: usize, cardinality: usize) -> Result<Tensor<T>> {
    let (n, c, hw) = split_dims(u, radix, "cardinal_fuse")?;
    if cardinality == 0 || c % cardinality != 0 {
        return Err(Error::config(format!(
            "cardinal_fuse: channels {c} not divisible by cardinality {cardinality}"
        )));
    }
    let s = u.shape();
    let x = u.data();
    let mut out = vec![T::zero(); n * c * hw];
    for b in 0..n {
        for r in 0..radix {
            let src = &x[(b * radix * c + r * c) * hw..][..c * hw];
            let dst = &mut out[b * c * hw..][..c * hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    Tensor::new(&[n, c, s[2], s[3]], out)
}

/// Each split receives the fused gradient unchanged.
pub fn cardinal_fuse_backward<T: Scalar>(grad: &Tensor<T>, radix: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = grad.dims4("cardinal_fuse_backward")?;
    let g = grad.data();
    let chunk = c * h * w;
    let mut out = Vec::with_capacity(n * radix * chunk);
    for b in 0..n {
        for _ in 0..radix {
            out.extend_from_slice(&g[b * chunk..(b + 1) * chunk]);
        }
    }
    Tensor::new(&[n, c * radix, h, w], out)
}

/// Per-channel spatial means of the fused map, read as `K` concatenated `s^k`.
pub fn channel_stats<T: Scalar>(fused: &Tensor<T>) -> Result<Tensor<T>> {
    global_avg_pool(fused)
}

/// Softmax over the radix axis for `R > 1`, sigmoid for `R = 1`.
pub fn r_softmax<T: Scalar>(logits: &SplitLogits<T>) -> Result<SplitWeights<T>> {
    logits.0.dims4("r_softmax")?;
    Ok(SplitWeights(if logits.radix() == 1 {
        ops::sigmoid(&logits.0)
    } else {
        ops::softmax(&logits.0, 2)?
    }))
}

pub fn r_softmax_backward<T: Scalar>(weights: &SplitWeights<T>, grad: &Tensor<T>) -> Result<SplitLogits<T>> {
    Ok(SplitLogits(if weights.radix() == 1 {
        ops::sigmoid_backward(&weights.0, grad)?
    } else {
        ops::softmax_backward(&weights.0, grad, 2)?
    }))
}

/// `V[k·C/K + c] = Σ_r a[n,k,r,c] · U[r·C + k·C/K + c]`, broadcast over space.
pub fn weighted_fuse<T: Scalar>(u: &Tensor<T>, a: &SplitWeights<T>) -> Result<Tensor<T>> {
    let (r, k, n, c, cg, hw) = fuse_dims(u, a, "weighted_fuse")?;
    let x = u.data();
    let mut out = vec![T::zero(); n * c * hw];
    for b in 0..n {
        for ri in 0..r {
            for ki in 0..k {
                for ci in 0..cg {
                    let j = ki * cg + ci;
                    let wgt = a.at(b, ki, ri, ci);
                    let src = &x[((b * r + ri) * c + j) * hw..][..hw];
                    let dst = &mut out[(b * c + j) * hw..][..hw];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += wgt * v;
                    }
                }
            }
        }
    }
    let s = u.shape();
    Tensor::new(&[n, c, s[2], s[3]], out)
}

/// Returns `(dU, da)` for [`weighted_fuse`].
pub fn weighted_fuse_backward<T: Scalar>(
    u: &Tensor<T>,
    a: &SplitWeights<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (r, k, n, c, cg, hw) = fuse_dims(u, a, "weighted_fuse_backward")?;
    grad.expect_shape(&[n, c, u.shape()[2], u.shape()[3]], "weighted_fuse_backward")?;
    let x = u.data();
    let g = grad.data();
    let mut du = vec![T::zero(); x.len()];
    let mut da = vec![T::zero(); a.0.numel()];
    for b in 0..n {
        for ri in 0..r {
            for ki in 0..k {
                for ci in 0..cg {
                    let j = ki * cg + ci;
                    let wgt = a.at(b, ki, ri, ci);
                    let base = ((b * r + ri) * c + j) * hw;
                    let gs = &g[(b * c + j) * hw..][..hw];
                    let mut acc = T::zero();
                    for p in 0..hw {
                        du[base + p] = wgt * gs[p];
                        acc += gs[p] * x[base + p];
                    }
                    da[((b * k + ki) * r + ri) * cg + ci] = acc;
                }
            }
        }
    }
    Ok((Tensor::new(u.shape(), du)?, Tensor::new(a.0.shape(), da)?))
}

fn fuse_dims<T: Scalar>(
    u: &Tensor<T>,
    a: &SplitWeights<T>,
    op: &'static str,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (an, k, r, cg) = a.0.dims4(op)?;
    let (n, c, hw) = split_dims(u, r, op)?;
    if an != n || k * cg != c {
        return Err(Error::shape(
            op,
            format!("weights {:?} do not match splits {:?}", a.0.shape(), u.shape()),
        ));
    }
    Ok((r, k, n, c, cg, hw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn fuse_identities() {
        let mut rng = RngState::new(3);
        let u = Tensor::<f64>::randn(&[2, 6, 3, 3], 1.0, &mut rng);
        assert_eq!(cardinal_fuse(&u, 1, 3).unwrap(), u);
        let neg = u.scale(-1.0);
        let pair = Tensor::concat_channels(&[u.clone(), neg]).unwrap();
        assert_eq!(cardinal_fuse(&pair, 2, 2).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn cardinal_fuse_index_oracle() {
        let mut rng = RngState::new(4);
        let (n, r, k, cg, h, w) = (2, 3, 2, 2, 2, 3);
        let c = k * cg;
        let u = Tensor::<f64>::randn(&[n, c * r, h, w], 1.0, &mut rng);
        let got = cardinal_fuse(&u, r, k).unwrap();
        for b in 0..n {
            for j in 0..c {
                for p in 0..h * w {
                    let want: f64 = (0..r).map(|ri| u.data()[((b * r * c) + ri * c + j) * h * w + p]).sum();
                    assert_eq!(got.data()[(b * c + j) * h * w + p], want);
                }
            }
        }
    }

    #[test]
    fn r_softmax_values() {
        let l = SplitLogits(Tensor::new(&[1, 1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let a = r_softmax(&l).unwrap();
        let want = [0.09003057f64, 0.24472847, 0.66524096];
        for (g, w) in a.0.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-8);
        }
        let l = SplitLogits(Tensor::new(&[1, 1, 1, 1], vec![0.0]).unwrap());
        assert_eq!(r_softmax(&l).unwrap().0.data(), &[0.5]);
        let l = SplitLogits(Tensor::full(&[2, 2, 2, 3], 7.5));
        assert!(r_softmax(&l).unwrap().0.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn weighted_fuse_examples() {
        let mut rng = RngState::new(5);
        let u = Tensor::<f64>::randn(&[2, 4, 3, 3], 1.0, &mut rng);
        let ones = SplitWeights(Tensor::ones(&[2, 2, 1, 2]));
        assert_eq!(weighted_fuse(&u, &ones).unwrap(), u);
        let half = SplitWeights(Tensor::full(&[2, 1, 2, 4], 0.5));
        let uu = Tensor::concat_channels(&[u.clone(), u.clone()]).unwrap();
        assert!(weighted_fuse(&uu, &half).unwrap().max_abs_diff(&u).unwrap() < 1e-15);
    }

    #[test]
    fn weighted_fuse_triple_loop_oracle() {
        let mut rng = RngState::new(6);
        let (n, r, k, cg, hw) = (2, 2, 2, 3, 4);
        let c = k * cg;
        let u = Tensor::<f64>::randn(&[n, c * r, 2, 2], 1.0, &mut rng);
        let a = r_softmax(&SplitLogits(Tensor::randn(&[n, k, r, cg], 1.0, &mut rng))).unwrap();
        let v = weighted_fuse(&u, &a).unwrap();
        for b in 0..n {
            for ki in 0..k {
                for ci in 0..cg {
                    for p in 0..hw {
                        let mut want = 0.0;
                        for ri in 0..r {
                            want += a.at(b, ki, ri, ci) * u.data()[((b * r + ri) * c + ki * cg + ci) * hw + p];
                        }
                        let got = v.data()[(b * c + ki * cg + ci) * hw + p];
                        assert!((got - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::gradcheck::{grad_check, DEFAULT_STEP};
        let mut rng = RngState::new(7);
        let u = Tensor::<f64>::randn(&[2, 8, 2, 2], 1.0, &mut rng);
        let z = Tensor::<f64>::randn(&[2, 2, 2, 2], 1.0, &mut rng);
        let proj = Tensor::<f64>::randn(&[2, 4, 2, 2], 1.0, &mut rng);
        let f = |t: &[Tensor<f64>]| {
            let a = r_softmax(&SplitLogits(t[1].clone())).unwrap();
            let v = weighted_fuse(&t[0], &a).unwrap();
            let fused = cardinal_fuse(&t[0], 2, 2).unwrap();
            v.dot(&proj).unwrap() + channel_stats(&fused).unwrap().sum().powi(2)
        };
        let a = r_softmax(&SplitLogits(z.clone())).unwrap();
        let (mut du, da) = weighted_fuse_backward(&u, &a, &proj).unwrap();
        let fused = cardinal_fuse(&u, 2, 2).unwrap();
        let s = channel_stats(&fused).unwrap().sum();
        let gs = Tensor::full(&[2, 4], 2.0 * s);
        let gf = ops::global_avg_pool_backward(fused.shape(), &gs).unwrap();
        du.add_assign(&cardinal_fuse_backward(&gf, 2).unwrap()).unwrap();
        let dz = r_softmax_backward(&a, &da).unwrap().0;
        let report = grad_check(&["u", "z"], &[u, z], &[du, dz], DEFAULT_STEP, 1e-7, f);
        assert!(report.passed(), "{report:?}");
    }
}
