//! Squeeze-and-gate formulation of a radix-1 unit, written with plain loops
//! and independent of the split-attention kernels.

use super::config::SplatConfig;
use super::unit::{downsample_pool, BnParams, SplatParams};
use crate::error::{Error, Result};
use crate::nn::BN_EPS;
use crate::ops::{avg_pool2d, batch_norm, conv2d, relu, sigmoid_scalar, Conv2dOptions, Mode, RunningStats};
use crate::tensor::{Scalar, Tensor};

fn normalise<T: Scalar>(x: &Tensor<T>, b: &BnParams<T>, mode: Mode) -> Result<Tensor<T>> {
    let mut running = RunningStats {
        mean: b.mean.clone(),
        var: b.var.clone(),
    };
    Ok(batch_norm(x, &b.gamma, &b.beta, &mut running, mode, 0.0, BN_EPS)?.0)
}

/// Per-feature normalisation of an `[N, F]` matrix, spelled out.
fn normalise_rows(z: &mut [Vec<f64>], b: &BnParams<f64>, mode: Mode) {
    let n = z.len();
    for f in 0..z[0].len() {
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = z.iter().map(|row| row[f]).sum::<f64>() / n as f64;
                let var = z.iter().map(|row| (row[f] - mean).powi(2)).sum::<f64>() / n as f64;
                (mean, var)
            }
            Mode::Eval => (b.mean.data()[f], b.var.data()[f]),
        };
        for row in z.iter_mut() {
            row[f] = b.gamma.data()[f] * (row[f] - mean) / (var + BN_EPS).sqrt() + b.beta.data()[f];
        }
    }
}

/// `V = U ⊙ sigmoid(fc2(relu(bn(fc1(mean_hw(U))))))` with each cardinal
/// group's head evaluated separately. Requires radix 1.
pub fn squeeze_and_gate(
    x: &Tensor<f64>,
    cfg: &SplatConfig,
    params: &SplatParams<f64>,
    mode: Mode,
) -> Result<Tensor<f64>> {
    cfg.validate()?;
    if cfg.radix != 1 {
        return Err(Error::config(format!(
            "squeeze_and_gate: radix must be 1, got {}",
            cfg.radix
        )));
    }
    let head = params
        .head
        .as_ref()
        .ok_or_else(|| Error::config("squeeze_and_gate: unit has no attention head"))?;
    let k = cfg.cardinality;
    let mut u = relu(&normalise(
        &conv2d(x, &params.conv1, None, Conv2dOptions::new(1, 0, 1))?,
        &params.bn1,
        mode,
    )?);
    if cfg.stride > 1 && cfg.fast {
        u = avg_pool2d(&u, downsample_pool(cfg.stride))?;
    }
    u = relu(&normalise(
        &conv2d(&u, &params.conv2, None, Conv2dOptions::new(1, 1, k))?,
        &params.bn2,
        mode,
    )?);

    let (n, c, h, w) = u.dims4("squeeze_and_gate")?;
    let cg = c / k;
    let inner = cfg.attention_inner;
    let ig = inner / k;
    let ud = u.data();
    let squeeze: Vec<Vec<f64>> = (0..n)
        .map(|b| {
            (0..c)
                .map(|ch| ud[(b * c + ch) * h * w..][..h * w].iter().sum::<f64>() / (h * w) as f64)
                .collect()
        })
        .collect();

    let mut hidden = vec![vec![0.0; inner]; n];
    for b in 0..n {
        for o in 0..inner {
            let grp = o / ig;
            let mut acc = head.fc1_bias.as_ref().map_or(0.0, |bias| bias.data()[o]);
            for i in 0..cg {
                acc += head.fc1.data()[o * cg + i] * squeeze[b][grp * cg + i];
            }
            hidden[b][o] = acc;
        }
    }
    if let Some(bn) = &head.bn {
        normalise_rows(&mut hidden, bn, mode);
    }
    let mut out = ud.to_vec();
    for b in 0..n {
        for o in 0..c {
            let grp = o / cg;
            let mut logit = head.fc2_bias.data()[o];
            for i in 0..ig {
                logit += head.fc2.data()[o * ig + i] * hidden[b][grp * ig + i].max(0.0);
            }
            let gate = sigmoid_scalar(logit);
            for v in &mut out[(b * c + o) * h * w..][..h * w] {
                *v *= gate;
            }
        }
    }
    let v = Tensor::new(&[n, c, h, w], out)?;
    if cfg.stride > 1 && !cfg.fast {
        return avg_pool2d(&v, downsample_pool(cfg.stride));
    }
    Ok(v)
}
