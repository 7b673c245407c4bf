use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given the forward *input*. The subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { T::zero() })
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Evaluated on the side that cannot overflow exp().
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// Gradient of sigmoid given the forward *output* `s`: `g * s * (1 - s)`.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.zip_map(grad_out, |s, g| g * s * (T::one() - s))
}

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, with the maximum subtracted before exponentiation.
pub fn softmax<T: Scalar>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut mx = T::neg_infinity();
            for k in 0..len {
                mx = mx.max(x[at(k)]);
            }
            let mut sum = T::zero();
            for k in 0..len {
                let e = (x[at(k)] - mx).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / sum;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

/// Vector-Jacobian product of softmax given its output `p`:
/// `dz_k = p_k (g_k - sum_j g_j p_j)`.
pub fn softmax_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    output.expect_same_shape(grad_out, "softmax_backward")?;
    let (outer, len, inner) = axis_layout(output.shape(), axis)?;
    let p = output.data();
    let g = grad_out.data();
    let mut dz = vec![T::zero(); p.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut dot = T::zero();
            for k in 0..len {
                dot += g[at(k)] * p[at(k)];
            }
            for k in 0..len {
                dz[at(k)] = p[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    Tensor::new(output.shape(), dz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn equal_logits_are_uniform() {
        for r in 1..6 {
            let t = Tensor::<f64>::full(&[2, r, 3], 4.2);
            let s = softmax(&t, 1).unwrap();
            assert!(s.data().iter().all(|&v| (v - 1.0 / r as f64).abs() < 1e-15));
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!(sigmoid_scalar(-800.0f64) >= 0.0);
        assert_eq!(sigmoid_scalar(800.0f64), 1.0);
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let t = Tensor::new(&[1, 3], vec![1000.0, 1001.0, 1002.0]).unwrap();
        let s = softmax(&t, 1).unwrap();
        let u = softmax(&Tensor::new(&[1, 3], vec![0.0, 1.0, 2.0]).unwrap(), 1).unwrap();
        assert!(s.max_abs_diff(&u).unwrap() < 1e-15);
        assert!(s.all_finite());
    }

    #[test]
    fn softmax_jacobian_matches_central_differences() {
        let mut rng = RngState::new(21);
        let z = Tensor::<f64>::randn(&[2, 4, 3], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[2, 4, 3], 1.0, &mut rng);
        let f = |z: &Tensor<f64>| softmax(z, 1).unwrap().dot(&w).unwrap();
        let p = softmax(&z, 1).unwrap();
        let analytic = softmax_backward(&p, &w, 1).unwrap();
        let h = 1e-5;
        for i in 0..z.numel() {
            let mut zp = z.clone();
            zp.data_mut()[i] += h;
            let mut zm = z.clone();
            zm.data_mut()[i] -= h;
            let num = (f(&zp) - f(&zm)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - num).abs() / (a.abs() + num.abs()).max(1e-8);
            assert!(rel < 1e-6, "entry {i}: {a} vs {num}");
        }
    }

    #[test]
    fn relu_backward_masks() {
        let x = Tensor::new(&[4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let g = Tensor::new(&[4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.5, 2.0]);
    }

    #[test]
    fn bad_axis() {
        assert!(softmax(&Tensor::<f64>::zeros(&[2, 2]), 2).is_err());
    }
}
