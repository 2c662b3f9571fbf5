//! 2-D convolution and transposed convolution kernels (forward and backward).
//!
//! The default path lowers each sample to a column matrix (im2col) and calls
//! gemm. [`conv2d_direct`] is the plain nested-loop kernel, kept for
//! benchmarking against the lowered path.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Dims, Real, Tensor4};

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// `floor((len + 2 pad - k) / stride) + 1`, or an error if non-positive.
    pub fn out_len(&self, len: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::invalid("kernel and stride must be at least 1"));
        }
        let padded = len + 2 * self.pad;
        if padded < self.kernel {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input extent {len} with padding {} is smaller than kernel {}",
                    self.pad, self.kernel
                ),
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution: `(len - 1) stride - 2 pad + k`.
    pub fn transpose_out_len(&self, len: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 || len == 0 {
            return Err(Error::invalid("kernel, stride and input extent must be at least 1"));
        }
        let full = (len - 1) * self.stride + self.kernel;
        if full <= 2 * self.pad {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("non-positive output extent for input {len}"),
            ));
        }
        Ok(full - 2 * self.pad)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let k = g.kernel;
    let p = ho * wo;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut cols[((c * k + kh) * k + kw) * p..][..p];
                for oh in 0..ho {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    let dst = &mut row[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let k = g.kernel;
    let p = ho * wo;
    for c in 0..c_in {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &cols[((c * k + kh) * k + kw) * p..][..p];
                for oh in 0..ho {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    for ow in 0..wo {
                        let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dst[iw as usize] += row[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn check_weight<T: Real>(op: &'static str, weight: &Tensor4<T>, c_in: usize, g: ConvGeom) -> Result<()> {
    let [_, wc, kh, kw] = weight.dims();
    if wc != c_in {
        return Err(Error::shape(
            op,
            format!("input has {c_in} channels, weight expects {wc}"),
        ));
    }
    if kh != g.kernel || kw != g.kernel {
        return Err(Error::shape(
            op,
            format!("weight kernel {kh}x{kw} does not match geometry {}", g.kernel),
        ));
    }
    Ok(())
}

/// Cross-correlation of `x` (`N x C_in x H x W`) with `weight`
/// (`C_out x C_in x k x k`), plus an optional per-output-channel bias.
pub fn conv2d_forward<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    g: ConvGeom,
) -> Result<Tensor4<T>> {
    let [n, c_in, h, w] = x.dims();
    check_weight("conv2d", weight, c_in, g)?;
    let c_out = weight.n();
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape("conv2d", "bias length differs from output channels"));
        }
    }
    let ho = g.out_len(h)?;
    let wo = g.out_len(w)?;
    let p = ho * wo;
    let kk = c_in * g.kernel * g.kernel;
    let mut y = Tensor4::zeros([n, c_out, ho, wo]);
    let xs = x.data();
    let wd = weight.data();
    par::for_each_chunk(y.data_mut(), c_out * p, |i, out| {
        let xi = &xs[i * c_in * h * w..(i + 1) * c_in * h * w];
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            xi
        } else {
            let mut buf = vec![T::zero(); kk * p];
            im2col(xi, c_in, h, w, g, ho, wo, &mut buf);
            owned = buf;
            &owned
        };
        T::gemm(c_out, kk, p, T::one(), wd, (kk as isize, 1), cols, (p as isize, 1), T::zero(), out, (p as isize, 1));
        if let Some(b) = bias {
            for (co, row) in out.chunks_mut(p).enumerate() {
                let bv = b[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Ok(y)
}

/// Gradient of [`conv2d_forward`] with respect to its input.
pub fn conv2d_input_grad<T: Real>(
    dy: &Tensor4<T>,
    weight: &Tensor4<T>,
    x_dims: Dims,
    g: ConvGeom,
) -> Tensor4<T> {
    let [n, c_in, h, w] = x_dims;
    let [_, c_out, ho, wo] = dy.dims();
    let p = ho * wo;
    let kk = c_in * g.kernel * g.kernel;
    let mut dx = Tensor4::zeros([n, c_in, h, w]);
    let dys = dy.data();
    let wd = weight.data();
    par::for_each_chunk(dx.data_mut(), c_in * h * w, |i, out| {
        let dyi = &dys[i * c_out * p..(i + 1) * c_out * p];
        if g.is_pointwise() {
            T::gemm(kk, c_out, p, T::one(), wd, (1, kk as isize), dyi, (p as isize, 1), T::zero(), out, (p as isize, 1));
        } else {
            let mut cols = vec![T::zero(); kk * p];
            T::gemm(kk, c_out, p, T::one(), wd, (1, kk as isize), dyi, (p as isize, 1), T::zero(), &mut cols, (p as isize, 1));
            col2im(&cols, c_in, h, w, g, ho, wo, out);
        }
    });
    dx
}

/// Gradient of [`conv2d_forward`] with respect to the weight. Per-sample
/// partial sums are reduced in sample order.
pub fn conv2d_weight_grad<T: Real>(x: &Tensor4<T>, dy: &Tensor4<T>, g: ConvGeom) -> Tensor4<T> {
    let [n, c_in, h, w] = x.dims();
    let [_, c_out, ho, wo] = dy.dims();
    let p = ho * wo;
    let kk = c_in * g.kernel * g.kernel;
    let xs = x.data();
    let dys = dy.data();
    let partials = par::map_indices(n, |i| {
        let xi = &xs[i * c_in * h * w..(i + 1) * c_in * h * w];
        let dyi = &dys[i * c_out * p..(i + 1) * c_out * p];
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            xi
        } else {
            let mut buf = vec![T::zero(); kk * p];
            im2col(xi, c_in, h, w, g, ho, wo, &mut buf);
            owned = buf;
            &owned
        };
        let mut dw = vec![T::zero(); c_out * kk];
        T::gemm(c_out, p, kk, T::one(), dyi, (p as isize, 1), cols, (1, p as isize), T::zero(), &mut dw, (kk as isize, 1));
        dw
    });
    let mut dw = Tensor4::zeros([c_out, c_in, g.kernel, g.kernel]);
    for part in partials {
        for (a, b) in dw.data_mut().iter_mut().zip(part) {
            *a += b;
        }
    }
    dw
}

/// Per-channel sum of `dy` over batch and space (the bias gradient).
pub fn channel_sums<T: Real>(dy: &Tensor4<T>) -> Vec<T> {
    let [n, c, _, _] = dy.dims();
    let p = dy.plane();
    let mut out = vec![T::zero(); c];
    for i in 0..n {
        for (ci, acc) in out.iter_mut().enumerate() {
            let base = (i * c + ci) * p;
            *acc += dy.data()[base..base + p].iter().copied().sum::<T>();
        }
    }
    out
}

/// Transposed convolution with weight `C_in x C_out x k x k`, the adjoint of
/// [`conv2d_forward`] with the same weight.
pub fn conv_transpose2d_forward<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    g: ConvGeom,
) -> Result<Tensor4<T>> {
    let [n, c_in, h, w] = x.dims();
    let [wc_in, c_out, kh, kw] = weight.dims();
    if wc_in != c_in {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("input has {c_in} channels, weight expects {wc_in}"),
        ));
    }
    if kh != g.kernel || kw != g.kernel {
        return Err(Error::shape("conv2d_transpose", "weight kernel does not match geometry"));
    }
    let ho = g.transpose_out_len(h)?;
    let wo = g.transpose_out_len(w)?;
    if g.out_len(ho)? != h || g.out_len(wo)? != w {
        return Err(Error::shape(
            "conv2d_transpose",
            "geometry is not invertible for this input extent",
        ));
    }
    let mut y = conv2d_input_grad(x, weight, [n, c_out, ho, wo], g);
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape("conv2d_transpose", "bias length differs from output channels"));
        }
        let p = ho * wo;
        for (idx, row) in y.data_mut().chunks_mut(p).enumerate() {
            let bv = b[idx % c_out];
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(y)
}

/// Returns `(dx, dweight)` for [`conv_transpose2d_forward`].
pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    dy: &Tensor4<T>,
    g: ConvGeom,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let dx = conv2d_forward(dy, weight, None, g)?;
    let dw = conv2d_weight_grad(dy, x, g);
    // conv2d_weight_grad(input = dy, dout = x) has layout C_in x C_out x k x k
    Ok((dx, dw))
}

/// Nested-loop convolution; same contract as [`conv2d_forward`].
pub fn conv2d_direct<T: Real>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    bias: Option<&[T]>,
    g: ConvGeom,
) -> Result<Tensor4<T>> {
    let [n, c_in, h, w] = x.dims();
    check_weight("conv2d", weight, c_in, g)?;
    let c_out = weight.n();
    let ho = g.out_len(h)?;
    let wo = g.out_len(w)?;
    let k = g.kernel;
    let mut y = Tensor4::zeros([n, c_out, ho, wo]);
    let xs = x.data();
    let wd = weight.data();
    par::for_each_chunk(y.data_mut(), c_out * ho * wo, |i, out| {
        for co in 0..c_out {
            let b = bias.map_or(T::zero(), |b| b[co]);
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = b;
                    for ci in 0..c_in {
                        for kh in 0..k {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let iw = (ow * g.stride + kw) as isize - g.pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += wd[((co * c_in + ci) * k + kh) * k + kw]
                                    * xs[((i * c_in + ci) * h + ih as usize) * w + iw as usize];
                            }
                        }
                    }
                    out[(co * ho + oh) * wo + ow] = acc;
                }
            }
        }
    });
    Ok(y)
}
