//! 2-D convolution with groups.
//!
//! Cross-correlation convention (the kernel is not flipped), zero padding.
//! Each group is lowered to a column matrix and multiplied with the flattened
//! filters; the inner loops are unit-stride axpy/dot kernels. Accumulation
//! order per output element is fixed, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dOptions {
            stride: (stride, stride),
            padding: (padding, padding),
            groups,
        }
    }
}

/// `floor((len + 2 pad - k) / stride) + 1`, or `None` when the window does not fit.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Output positions `[lo, hi)` whose tap at kernel offset `k_off` lands inside the input.
#[inline]
pub(crate) fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, k_off: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let hi = if in_len + pad > k_off {
        ((in_len - 1 + pad - k_off) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

fn geometry<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, opts: Conv2dOptions) -> Result<Geometry> {
    let (n, cin, h, w) = input.dims4("conv2d")?;
    let (cout, wcin, kh, kw) = weight.dims4("conv2d weight")?;
    let g = opts.groups;
    if g == 0 {
        return Err(Error::config("conv2d: groups must be at least 1"));
    }
    if cin % g != 0 {
        return Err(Error::config(format!(
            "conv2d: in_channels {cin} not divisible by groups {g}"
        )));
    }
    if cout % g != 0 {
        return Err(Error::config(format!(
            "conv2d: out_channels {cout} not divisible by groups {g}"
        )));
    }
    if wcin != cin / g {
        return Err(Error::config(format!(
            "conv2d: weight expects {wcin} input channels per group, input provides {}",
            cin / g
        )));
    }
    let (sh, sw) = opts.stride;
    let (ph, pw) = opts.padding;
    let oh = conv_out_len(h, kh, sh, ph).ok_or_else(|| {
        Error::config(format!(
            "conv2d: kernel height {kh} exceeds padded height {} (stride {sh})",
            h + 2 * ph
        ))
    })?;
    let ow = conv_out_len(w, kw, sw, pw).ok_or_else(|| {
        Error::config(format!(
            "conv2d: kernel width {kw} exceeds padded width {} (stride {sw})",
            w + 2 * pw
        ))
    })?;
    Ok(Geometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
        groups: g,
        cin_g: cin / g,
        cout_g: cout / g,
        sh,
        sw,
        ph,
        pw,
    })
}

/// Upper bound on the lowered-column buffer, in elements. Samples are
/// processed in chunks that fit; the chunk size depends only on the shapes.
const COLS_BUDGET: usize = 1 << 21;

/// Column tile for the products, sized so a tile of the lowered matrix stays
/// in cache.
const TILE: usize = 256;

fn samples_per_chunk(g: &Geometry) -> usize {
    let per_sample = g.cin_g * g.kh * g.kw * g.oh * g.ow;
    (COLS_BUDGET / per_sample.max(1)).clamp(1, g.n)
}

/// `y += a * x`.
#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Lowers samples `[b0, b0 + nb)` of group `grp` into a `[Cin_g·kh·kw, nb·oh·ow]`
/// matrix. Taps that land in the padding are zero.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, grp: usize, b0: usize, nb: usize, cols: &mut [T]) {
    let p = g.oh * g.ow;
    let np = nb * p;
    let plane_in = g.h * g.w;
    for ic in 0..g.cin_g {
        let c = grp * g.cin_g + ic;
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.oh, g.h, g.sh, g.ph, ky);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.ow, g.w, g.sw, g.pw, kx);
                let row = (ic * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * np..][..np];
                for bi in 0..nb {
                    let plane = &x[((b0 + bi) * g.cin + c) * plane_in..][..plane_in];
                    let d = &mut dst[bi * p..][..p];
                    d.fill(T::zero());
                    if xlo >= xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = oy * g.sh + ky - g.ph;
                        let src = &plane[iy * g.w..][..g.w];
                        let drow = &mut d[oy * g.ow..][..g.ow];
                        if g.sw == 1 {
                            let off = xlo + kx - g.pw;
                            drow[xlo..xhi].copy_from_slice(&src[off..off + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                drow[ox] = src[ox * g.sw + kx - g.pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds lowered columns back into `gx`.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, grp: usize, b0: usize, nb: usize, gx: &mut [T]) {
    let p = g.oh * g.ow;
    let np = nb * p;
    let plane_in = g.h * g.w;
    for ic in 0..g.cin_g {
        let c = grp * g.cin_g + ic;
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.oh, g.h, g.sh, g.ph, ky);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.ow, g.w, g.sw, g.pw, kx);
                if xlo >= xhi {
                    continue;
                }
                let row = (ic * g.kh + ky) * g.kw + kx;
                let src = &cols[row * np..][..np];
                for bi in 0..nb {
                    let plane = &mut gx[((b0 + bi) * g.cin + c) * plane_in..][..plane_in];
                    let s = &src[bi * p..][..p];
                    for oy in ylo..yhi {
                        let iy = oy * g.sh + ky - g.ph;
                        let dst = &mut plane[iy * g.w..][..g.w];
                        let srow = &s[oy * g.ow..][..g.ow];
                        if g.sw == 1 {
                            let off = xlo + kx - g.pw;
                            for (d, &v) in dst[off..off + (xhi - xlo)].iter_mut().zip(&srow[xlo..xhi]) {
                                *d += v;
                            }
                        } else {
                            for ox in xlo..xhi {
                                dst[ox * g.sw + kx - g.pw] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Lowered convolution: each group is one `[Cout_g, K] x [K, nb·oh·ow]`
/// product per chunk of samples. Every output element sums its taps in
/// `(ic, ky, kx)` order, so results do not depend on the chunking.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    opts: Conv2dOptions,
) -> Result<Tensor<T>> {
    let g = geometry(input, weight, opts)?;
    if let Some(b) = bias {
        b.expect_shape(&[g.cout], "conv2d bias")?;
    }
    let p = g.oh * g.ow;
    let kdim = g.cin_g * g.kh * g.kw;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let chunk = samples_per_chunk(&g);
    let mut cols = vec![T::zero(); kdim * chunk * p];
    let mut acc = vec![T::zero(); g.cout_g * chunk * p];

    for b0 in (0..g.n).step_by(chunk) {
        let nb = chunk.min(g.n - b0);
        let np = nb * p;
        for grp in 0..g.groups {
            im2col(x, &g, grp, b0, nb, &mut cols);
            for t0 in (0..np).step_by(TILE) {
                let tl = TILE.min(np - t0);
                for oc in 0..g.cout_g {
                    let o = grp * g.cout_g + oc;
                    let row = &mut acc[oc * np + t0..][..tl];
                    row.fill(bias.map_or(T::zero(), |b| b.data()[o]));
                    for (kk, &a) in wt[o * kdim..][..kdim].iter().enumerate() {
                        axpy(row, a, &cols[kk * np + t0..][..tl]);
                    }
                }
            }
            for oc in 0..g.cout_g {
                let o = grp * g.cout_g + oc;
                for bi in 0..nb {
                    out[((b0 + bi) * g.cout + o) * p..][..p].copy_from_slice(&acc[oc * np + bi * p..][..p]);
                }
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.oh, g.ow], out)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Gradients of `conv2d` with respect to its input, weight and (optionally) bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    with_bias: bool,
    opts: Conv2dOptions,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let g = geometry(input, weight, opts)?;
    grad_out.expect_shape(&[g.n, g.cout, g.oh, g.ow], "conv2d_backward")?;
    let p = g.oh * g.ow;
    let kdim = g.cin_g * g.kh * g.kw;
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wt.len()];
    let chunk = samples_per_chunk(&g);
    let mut cols = vec![T::zero(); kdim * chunk * p];
    let mut dcols = vec![T::zero(); kdim * chunk * p];
    let mut gout = vec![T::zero(); g.cout_g * chunk * p];

    for b0 in (0..g.n).step_by(chunk) {
        let nb = chunk.min(g.n - b0);
        let np = nb * p;
        for grp in 0..g.groups {
            for oc in 0..g.cout_g {
                let o = grp * g.cout_g + oc;
                for bi in 0..nb {
                    gout[oc * np + bi * p..][..p].copy_from_slice(&go[((b0 + bi) * g.cout + o) * p..][..p]);
                }
            }
            im2col(x, &g, grp, b0, nb, &mut cols);
            for t0 in (0..np).step_by(TILE) {
                let tl = TILE.min(np - t0);
                for oc in 0..g.cout_g {
                    let o = grp * g.cout_g + oc;
                    let grow = &gout[oc * np + t0..][..tl];
                    for kk in 0..kdim {
                        gw[o * kdim + kk] += dot(grow, &cols[kk * np + t0..][..tl]);
                    }
                }
                for kk in 0..kdim {
                    let drow = &mut dcols[kk * np + t0..][..tl];
                    drow.fill(T::zero());
                    for oc in 0..g.cout_g {
                        let o = grp * g.cout_g + oc;
                        axpy(drow, wt[o * kdim + kk], &gout[oc * np + t0..][..tl]);
                    }
                }
            }
            col2im(&dcols, &g, grp, b0, nb, &mut gx);
        }
    }

    let bias = if with_bias {
        let mut gb = vec![T::zero(); g.cout];
        for b in 0..g.n {
            for (o, slot) in gb.iter_mut().enumerate() {
                *slot += go[(b * g.cout + o) * p..][..p].iter().copied().sum::<T>();
            }
        }
        Some(Tensor::new(&[g.cout], gb)?)
    } else {
        None
    };

    Ok(Conv2dGrads {
        input: Tensor::new(input.shape(), gx)?,
        weight: Tensor::new(weight.shape(), gw)?,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    /// Seven nested loops straight from the definition, independent of the
    /// row-range bookkeeping above.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4("t").unwrap();
        let (cout, cin_g, kh, kw) = w.dims4("t").unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let cout_g = cout / groups;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for b in 0..n {
            for o in 0..cout {
                let grp = o / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = bias.map_or(0.0, |t| t.data()[o]);
                        for ic in 0..cin_g {
                            let i = grp * cin_g + ic;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += w.data()[((o * cin_g + ic) * kh + ky) * kw + kx]
                                        * x.data()[((b * cin + i) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((b * cout + o) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        let _ = cin;
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = RngState::new(1);
        let x = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, None, Conv2dOptions::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_sums_window() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, Conv2dOptions::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn grouped_matches_naive_oracle() {
        let mut rng = RngState::new(2);
        let x = Tensor::<f64>::randn(&[1, 4, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[6, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[6], 1.0, &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let opts = Conv2dOptions::new(stride, pad, 2);
            let y = conv2d(&x, &w, Some(&b), opts).unwrap();
            let r = naive_conv(&x, &w, Some(&b), stride, pad, 2);
            assert!(y.max_abs_diff(&r).unwrap() < 1e-12, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn groups_equal_concatenated_slices() {
        let mut rng = RngState::new(3);
        let x = Tensor::<f64>::randn(&[2, 6, 5, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[9, 2, 3, 3], 1.0, &mut rng);
        let y = conv2d(&x, &w, None, Conv2dOptions::new(1, 1, 3)).unwrap();
        let parts: Vec<_> = (0..3)
            .map(|g| {
                let xs = x.narrow_channels(2 * g, 2).unwrap();
                let ws = Tensor::new(&[3, 2, 3, 3], w.data()[g * 54..(g + 1) * 54].to_vec()).unwrap();
                conv2d(&xs, &ws, None, Conv2dOptions::new(1, 1, 1)).unwrap()
            })
            .collect();
        assert_eq!(Tensor::concat_channels(&parts).unwrap(), y);
    }

    #[test]
    fn divisibility_errors_name_dimension() {
        let x = Tensor::<f64>::zeros(&[1, 5, 4, 4]);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let err = conv2d(&x, &w, None, Conv2dOptions::new(1, 1, 2)).unwrap_err();
        assert!(err.to_string().contains("in_channels 5"), "{err}");
        let x = Tensor::<f64>::zeros(&[1, 4, 4, 4]);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let err = conv2d(&x, &w, None, Conv2dOptions::new(1, 1, 2)).unwrap_err();
        assert!(err.to_string().contains("out_channels 3"), "{err}");
        let w = Tensor::zeros(&[2, 4, 7, 7]);
        let err = conv2d(&x, &w, None, Conv2dOptions::new(1, 0, 1)).unwrap_err();
        assert!(err.to_string().contains("kernel height"), "{err}");
    }

    #[test]
    fn output_length_formula() {
        assert_eq!(conv_out_len(224, 3, 2, 1), Some(112));
        assert_eq!(conv_out_len(56, 3, 1, 1), Some(56));
        assert_eq!(conv_out_len(7, 3, 2, 0), Some(3));
        assert_eq!(conv_out_len(2, 5, 1, 1), None);
    }

    #[test]
    fn valid_range_agrees_with_bounds_check() {
        for in_len in 1..7 {
            for k in 1..5 {
                for stride in 1..4 {
                    for pad in 0..3 {
                        let Some(out_len) = conv_out_len(in_len, k, stride, pad) else {
                            continue;
                        };
                        for k_off in 0..k {
                            let (lo, hi) = valid_range(out_len, in_len, stride, pad, k_off);
                            for o in 0..out_len {
                                let i = (o * stride + k_off) as isize - pad as isize;
                                let inside = i >= 0 && (i as usize) < in_len;
                                assert_eq!(inside, o >= lo && o < hi);
                            }
                        }
                    }
                }
            }
        }
    }
}
