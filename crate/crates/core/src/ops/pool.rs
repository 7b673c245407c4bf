//! Average, max and global average pooling.

use super::conv::conv_out_len;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolOptions {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// Average pooling only: divide by the full window size instead of the
    /// number of in-bounds elements.
    pub count_includes_pad: bool,
}

impl PoolOptions {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolOptions {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            count_includes_pad: false,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = conv_out_len(h, self.kernel.0, self.stride.0, self.padding.0);
        let ow = conv_out_len(w, self.kernel.1, self.stride.1, self.padding.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::config(format!(
                "pool: kernel {:?} larger than padded input {}x{}",
                self.kernel,
                h + 2 * self.padding.0,
                w + 2 * self.padding.1
            ))),
        }
    }

    /// Window geometry for output `(oy, ox)`: in-bounds row range, column
    /// range, and the averaging divisor.
    fn window(&self, oy: usize, ox: usize, h: usize, w: usize) -> (usize, usize, usize, usize, usize) {
        let y0 = (oy * self.stride.0) as isize - self.padding.0 as isize;
        let x0 = (ox * self.stride.1) as isize - self.padding.1 as isize;
        let y1 = y0 + self.kernel.0 as isize;
        let x1 = x0 + self.kernel.1 as isize;
        let ys = y0.max(0) as usize;
        let xs = x0.max(0) as usize;
        let ye = (y1.min(h as isize)).max(0) as usize;
        let xe = (x1.min(w as isize)).max(0) as usize;
        let count = if self.count_includes_pad {
            self.kernel.0 * self.kernel.1
        } else {
            ye.saturating_sub(ys) * xe.saturating_sub(xs)
        };
        (ys, ye, xs, xe, count)
    }
}

pub fn avg_pool2d<T: Scalar>(input: &Tensor<T>, opts: PoolOptions) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("avg_pool2d")?;
    let (oh, ow) = opts.output_hw(h, w)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let p = &x[plane * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (ys, ye, xs, xe, count) = opts.window(oy, ox, h, w);
                let mut s = T::zero();
                for iy in ys..ye {
                    for ix in xs..xe {
                        s += p[iy * w + ix];
                    }
                }
                out.push(if count == 0 { T::zero() } else { s / T::of(count as f64) });
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Spreads each output gradient uniformly over its window.
pub fn avg_pool2d_backward<T: Scalar>(
    input_shape: &[usize],
    opts: PoolOptions,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::shape("avg_pool2d_backward", format!("{input_shape:?}")));
    };
    let (oh, ow) = opts.output_hw(h, w)?;
    grad_out.expect_shape(&[n, c, oh, ow], "avg_pool2d_backward")?;
    let go = grad_out.data();
    let mut gx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let gp = &mut gx[plane * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (ys, ye, xs, xe, count) = opts.window(oy, ox, h, w);
                if count == 0 {
                    continue;
                }
                let share = go[(plane * oh + oy) * ow + ox] / T::of(count as f64);
                for iy in ys..ye {
                    for ix in xs..xe {
                        gp[iy * w + ix] += share;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape, gx)
}

/// Max pooling with implicit `-inf` padding. Returns the output and, for
/// each output element, the flat input index that won (first maximum on ties).
pub fn max_pool2d<T: Scalar>(input: &Tensor<T>, opts: PoolOptions) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4("max_pool2d")?;
    let (oh, ow) = opts.output_hw(h, w)?;
    if opts.padding.0 * 2 > opts.kernel.0 || opts.padding.1 * 2 > opts.kernel.1 {
        return Err(Error::config("max_pool2d: padding must be at most half the kernel"));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (ys, ye, xs, xe, _) = opts.window(oy, ox, h, w);
                let mut best = T::neg_infinity();
                let mut best_i = base + ys * w + xs;
                for iy in ys..ye {
                    for ix in xs..xe {
                        let v = x[base + iy * w + ix];
                        if v > best {
                            best = v;
                            best_i = base + iy * w + ix;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, arg))
}

pub fn max_pool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.numel() {
        return Err(Error::shape("max_pool2d_backward", "argmax length mismatch"));
    }
    let mut gx = Tensor::zeros(input_shape);
    let g = gx.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        g[i] += v;
    }
    Ok(gx)
}

/// `out[n, c] = mean over (h, w) of input[n, c, h, w]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("global_avg_pool")?;
    let hw = h * w;
    let inv = T::one() / T::of(hw as f64);
    let out = input
        .data()
        .chunks_exact(hw)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[n, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::shape("global_avg_pool_backward", format!("{input_shape:?}")));
    };
    grad_out.expect_shape(&[n, c], "global_avg_pool_backward")?;
    let hw = h * w;
    let inv = T::one() / T::of(hw as f64);
    let mut data = Vec::with_capacity(n * c * hw);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::new(input_shape, data)
}
