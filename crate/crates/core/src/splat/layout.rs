//! Cardinality-major evaluation and the parameter bijection that relates it
//! to the radix-major unit.

use super::config::SplatConfig;
use super::unit::{downsample_pool, BnParams, HeadParams, SplatParams};
use crate::error::{Error, Result};
use crate::nn::{BN_EPS, BN_MOMENTUM};
use crate::ops::{
    self, avg_pool2d, batch_norm, conv2d, fully_connected, global_avg_pool, relu, Conv2dOptions, Mode, RunningStats,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    CardinalityToRadix,
    RadixToCardinality,
}

impl Direction {
    pub fn inverse(self) -> Self {
        match self {
            Direction::CardinalityToRadix => Direction::RadixToCardinality,
            Direction::RadixToCardinality => Direction::CardinalityToRadix,
        }
    }
}

/// `perm[g]` is the source group that lands at group `g`.
pub fn group_permutation(cfg: &SplatConfig, dir: Direction) -> Vec<usize> {
    let (r, k) = (cfg.radix, cfg.cardinality);
    (0..r * k)
        .map(|g| match dir {
            // target is radix-major: g = ri·K + ki, source k·R + r
            Direction::CardinalityToRadix => (g % k) * r + g / k,
            Direction::RadixToCardinality => (g % r) * k + g / r,
        })
        .collect()
}

fn permute_rows<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rows = t.shape()[0];
    if rows % perm.len() != 0 {
        return Err(Error::shape(
            "permute_params",
            format!("{rows} rows not divisible into {} groups", perm.len()),
        ));
    }
    let block = rows / perm.len() * (t.numel() / rows);
    let src = t.data();
    let mut out = Vec::with_capacity(t.numel());
    for &p in perm {
        out.extend_from_slice(&src[p * block..(p + 1) * block]);
    }
    Tensor::new(t.shape(), out)
}

fn permute_bn<T: Scalar>(b: &BnParams<T>, perm: &[usize]) -> Result<BnParams<T>> {
    Ok(BnParams {
        gamma: permute_rows(&b.gamma, perm)?,
        beta: permute_rows(&b.beta, perm)?,
        mean: permute_rows(&b.mean, perm)?,
        var: permute_rows(&b.var, perm)?,
    })
}

/// Reorders the split-transform filters and normalisation channels between
/// the two group orderings. The attention head is laid out per cardinal group
/// with radix-major logits inside each group in both paths, so it passes
/// through unchanged.
pub fn permute_params<T: Scalar>(params: &SplatParams<T>, cfg: &SplatConfig, dir: Direction) -> Result<SplatParams<T>> {
    let perm = group_permutation(cfg, dir);
    Ok(SplatParams {
        conv1: permute_rows(&params.conv1, &perm)?,
        bn1: permute_bn(&params.bn1, &perm)?,
        conv2: permute_rows(&params.conv2, &perm)?,
        bn2: permute_bn(&params.bn2, &perm)?,
        head: params.head.clone(),
    })
}

fn rows<T: Scalar>(t: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let per = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Tensor::new(&shape, t.data()[start * per..(start + len) * per].to_vec())
}

fn bn_slice<T: Scalar>(x: &Tensor<T>, b: &BnParams<T>, start: usize, len: usize, mode: Mode) -> Result<Tensor<T>> {
    let mut running = RunningStats {
        mean: rows(&b.mean, start, len)?,
        var: rows(&b.var, start, len)?,
    };
    let (y, _) = batch_norm(
        x,
        &rows(&b.gamma, start, len)?,
        &rows(&b.beta, start, len)?,
        &mut running,
        mode,
        BN_MOMENTUM,
        BN_EPS,
    )?;
    Ok(y)
}

/// Evaluates the unit with groups ordered `g = k·R + r`: one explicit
/// transform per feature group and dense attention FCs per cardinal group.
pub fn forward_cardinality_major<T: Scalar>(
    x: &Tensor<T>,
    cfg: &SplatConfig,
    params: &SplatParams<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (r, k) = (cfg.radix, cfg.cardinality);
    let wg = cfg.transform_width / cfg.groups();
    let cg = cfg.group_width();
    let downsample = cfg.stride > 1;

    let mut outputs = Vec::with_capacity(k);
    for ki in 0..k {
        let mut splits = Vec::with_capacity(r);
        for ri in 0..r {
            let g = ki * r + ri;
            let mut h = conv2d(x, &rows(&params.conv1, g * wg, wg)?, None, Conv2dOptions::new(1, 0, 1))?;
            h = relu(&bn_slice(&h, &params.bn1, g * wg, wg, mode)?);
            if downsample && cfg.fast {
                h = avg_pool2d(&h, downsample_pool(cfg.stride))?;
            }
            h = conv2d(&h, &rows(&params.conv2, g * cg, cg)?, None, Conv2dOptions::new(1, 1, 1))?;
            splits.push(relu(&bn_slice(&h, &params.bn2, g * cg, cg, mode)?));
        }
        let mut fused = Tensor::zeros(splits[0].shape());
        for s in &splits {
            fused.add_assign(s)?;
        }
        let v = match &params.head {
            None => fused,
            Some(head) => cardinal_group_attention(&fused, &splits, head, cfg, ki, mode)?,
        };
        outputs.push(v);
    }
    let v = Tensor::concat_channels(&outputs)?;
    if downsample && !cfg.fast {
        return avg_pool2d(&v, downsample_pool(cfg.stride));
    }
    Ok(v)
}

fn cardinal_group_attention<T: Scalar>(
    fused: &Tensor<T>,
    splits: &[Tensor<T>],
    head: &HeadParams<T>,
    cfg: &SplatConfig,
    ki: usize,
    mode: Mode,
) -> Result<Tensor<T>> {
    let r = cfg.radix;
    let cg = cfg.group_width();
    let ig = cfg.attention_inner / cfg.cardinality;
    let s = global_avg_pool(fused)?;
    let b1 = head.fc1_bias.as_ref().map(|b| rows(b, ki * ig, ig)).transpose()?;
    let mut z = fully_connected(&s, &rows(&head.fc1, ki * ig, ig)?, b1.as_ref(), 1)?;
    if let Some(bn) = &head.bn {
        z = bn_slice(&z, bn, ki * ig, ig, mode)?;
    }
    z = relu(&z);
    let b2 = rows(&head.fc2_bias, ki * r * cg, r * cg)?;
    let logits = fully_connected(&z, &rows(&head.fc2, ki * r * cg, r * cg)?, Some(&b2), 1)?;
    let n = logits.shape()[0];
    let logits = logits.into_reshaped(&[n, r, cg])?;
    let a = if r == 1 {
        ops::sigmoid(&logits)
    } else {
        ops::softmax(&logits, 1)?
    };

    let (_, _, h, w) = fused.dims4("cardinal_group_attention")?;
    let hw = h * w;
    let mut v = vec![T::zero(); n * cg * hw];
    for b in 0..n {
        for (ri, split) in splits.iter().enumerate() {
            for c in 0..cg {
                let wgt = a.data()[(b * r + ri) * cg + c];
                let src = &split.data()[(b * cg + c) * hw..][..hw];
                for (d, &u) in v[(b * cg + c) * hw..][..hw].iter_mut().zip(src) {
                    *d += wgt * u;
                }
            }
        }
    }
    Tensor::new(&[n, cg, h, w], v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::splat::forward_radix_major;

    #[test]
    fn permutation_is_a_bijection_and_inverts() {
        for (r, k) in [(1, 1), (2, 1), (1, 3), (2, 3), (4, 2)] {
            let cfg = SplatConfig::new(4, 4 * k, r, k);
            let p = group_permutation(&cfg, Direction::CardinalityToRadix);
            let q = group_permutation(&cfg, Direction::RadixToCardinality);
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..r * k).collect::<Vec<_>>());
            for g in 0..r * k {
                assert_eq!(p[q[g]], g);
            }
            if r == 1 || k == 1 {
                assert_eq!(p, (0..r * k).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = SplatConfig::new(3, 8, 2, 2);
        let p = SplatParams::<f64>::random(&cfg, &mut RngState::new(1));
        let there = permute_params(&p, &cfg, Direction::CardinalityToRadix).unwrap();
        assert_ne!(there, p);
        assert_eq!(permute_params(&there, &cfg, Direction::RadixToCardinality).unwrap(), p);
    }

    #[test]
    fn layouts_agree_after_permutation() {
        let mut rng = RngState::new(2);
        for (stride, fast) in [(1, true), (2, true), (2, false)] {
            let cfg = SplatConfig::new(3, 8, 2, 2).with_stride(stride).with_fast(fast);
            let card = SplatParams::<f64>::random(&cfg, &mut rng);
            let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng);
            let radix = permute_params(&card, &cfg, Direction::CardinalityToRadix).unwrap();
            for mode in [Mode::Train, Mode::Eval] {
                let a = forward_cardinality_major(&x, &cfg, &card, mode).unwrap();
                let b = forward_radix_major(&x, &cfg, &radix, mode).unwrap();
                assert!(
                    a.max_abs_diff(&b).unwrap() < 1e-10,
                    "stride {stride} fast {fast} {mode:?}"
                );
            }
        }
    }

    #[test]
    fn degenerate_layouts_are_bitwise_equal() {
        let mut rng = RngState::new(3);
        for (r, k) in [(1, 2), (2, 1)] {
            let cfg = SplatConfig::new(4, 8, r, k);
            let p = SplatParams::<f64>::random(&cfg, &mut rng);
            let x = Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng);
            let a = forward_cardinality_major(&x, &cfg, &p, Mode::Eval).unwrap();
            let b = forward_radix_major(&x, &cfg, &p, Mode::Eval).unwrap();
            assert_eq!(a, b, "R={r} K={k}");
        }
    }
}
