//! Grouped fully-connected layer: output group `i` reads only input group `i`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, groups: usize) -> Result<(usize, usize, usize, usize)> {
    let (n, f) = input.dims2("fully_connected")?;
    let (o, fg) = weight.dims2("fully_connected weight")?;
    if groups == 0 {
        return Err(Error::config("fully_connected: groups must be at least 1"));
    }
    if f % groups != 0 {
        return Err(Error::config(format!(
            "fully_connected: in_features {f} not divisible by groups {groups}"
        )));
    }
    if o % groups != 0 {
        return Err(Error::config(format!(
            "fully_connected: out_features {o} not divisible by groups {groups}"
        )));
    }
    if fg != f / groups {
        return Err(Error::config(format!(
            "fully_connected: weight expects {fg} inputs per group, input provides {}",
            f / groups
        )));
    }
    Ok((n, f, o, fg))
}

pub fn fully_connected<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    groups: usize,
) -> Result<Tensor<T>> {
    let (n, f, o, fg) = check(input, weight, groups)?;
    if let Some(b) = bias {
        b.expect_shape(&[o], "fully_connected bias")?;
    }
    let og = o / groups;
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(n * o);
    for b in 0..n {
        for j in 0..o {
            let grp = j / og;
            let xs = &x[b * f + grp * fg..][..fg];
            let ws = &w[j * fg..][..fg];
            let mut s = bias.map_or(T::zero(), |t| t.data()[j]);
            for (&a, &c) in ws.iter().zip(xs) {
                s += a * c;
            }
            out.push(s);
        }
    }
    Tensor::new(&[n, o], out)
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn fully_connected_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    with_bias: bool,
    groups: usize,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, f, o, fg) = check(input, weight, groups)?;
    grad_out.expect_shape(&[n, o], "fully_connected_backward")?;
    let og = o / groups;
    let x = input.data();
    let w = weight.data();
    let go = grad_out.data();
    let mut gx = vec![T::zero(); n * f];
    let mut gw = vec![T::zero(); o * fg];
    for b in 0..n {
        for j in 0..o {
            let grp = j / og;
            let g = go[b * o + j];
            let xoff = b * f + grp * fg;
            for k in 0..fg {
                gx[xoff + k] += w[j * fg + k] * g;
                gw[j * fg + k] += g * x[xoff + k];
            }
        }
    }
    let bias = if with_bias {
        let mut gb = vec![T::zero(); o];
        for b in 0..n {
            for j in 0..o {
                gb[j] += go[b * o + j];
            }
        }
        Some(Tensor::new(&[o], gb)?)
    } else {
        None
    };
    Ok(LinearGrads {
        input: Tensor::new(&[n, f], gx)?,
        weight: Tensor::new(&[o, fg], gw)?,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn identity_weight() {
        let mut rng = RngState::new(1);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(fully_connected(&x, &w, None, 1).unwrap(), x);
    }

    #[test]
    fn grouped_equals_two_dense_halves() {
        let mut rng = RngState::new(2);
        let x = Tensor::<f64>::randn(&[2, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[4], 1.0, &mut rng);
        let y = fully_connected(&x, &w, Some(&b), 2).unwrap();
        let halves: Vec<_> = (0..2)
            .map(|g| {
                let xs = x.narrow_channels(3 * g, 3).unwrap();
                let ws = Tensor::new(&[2, 3], w.data()[g * 6..(g + 1) * 6].to_vec()).unwrap();
                let bs = Tensor::new(&[2], b.data()[g * 2..(g + 1) * 2].to_vec()).unwrap();
                fully_connected(&xs, &ws, Some(&bs), 1).unwrap()
            })
            .collect();
        assert_eq!(Tensor::concat_channels(&halves).unwrap(), y);
    }

    #[test]
    fn matches_matrix_multiply_oracle() {
        let mut rng = RngState::new(3);
        let (n, f, o, g) = (3, 8, 6, 2);
        let x = Tensor::<f64>::randn(&[n, f], 1.0, &mut rng);
        let w = Tensor::randn(&[o, f / g], 1.0, &mut rng);
        let y = fully_connected(&x, &w, None, g).unwrap();
        // Block-diagonal dense matrix built explicitly.
        let mut dense = vec![0.0; o * f];
        for j in 0..o {
            let grp = j / (o / g);
            for k in 0..f / g {
                dense[j * f + grp * (f / g) + k] = w.data()[j * (f / g) + k];
            }
        }
        for b in 0..n {
            for j in 0..o {
                let r: f64 = (0..f).map(|k| dense[j * f + k] * x.data()[b * f + k]).sum();
                assert!((r - y.data()[b * o + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn divisibility_errors() {
        let x = Tensor::<f64>::zeros(&[1, 5]);
        let w = Tensor::zeros(&[4, 2]);
        assert!(matches!(fully_connected(&x, &w, None, 2), Err(Error::Config(_))));
    }
}
