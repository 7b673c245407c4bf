use super::Mode;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

/// Inverted dropout. Returns the output and the multiplicative mask applied
/// (zeros for dropped elements, `1 / (1 - p)` for survivors), which is also
/// the backward multiplier. Eval mode and `p = 0` return the input unchanged
/// with an all-ones mask and consume no randomness.
pub fn dropout<T: Scalar>(input: &Tensor<T>, p: f64, rng: &mut RngState, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout: probability {p} must lie in [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((input.clone(), Tensor::ones(input.shape())));
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mask = Tensor::from_fn(input.shape(), |_| if rng.bernoulli(p) { T::zero() } else { keep });
    Ok((input.mul(&mask)?, mask))
}
