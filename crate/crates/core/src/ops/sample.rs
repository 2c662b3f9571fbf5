//! Resampling kernels: adaptive average pooling to a fixed bin grid and
//! half-pixel bilinear resize.

use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor4};

/// Bin `i` of `k` over an extent `len` spans `floor(i len / k)..floor((i+1) len / k)`.
#[inline]
pub fn bin_range(i: usize, k: usize, len: usize) -> (usize, usize) {
    (i * len / k, (i + 1) * len / k)
}

/// Averages each plane into a `k x k` grid of adaptive bins.
pub fn avg_pool_to_bins<T: Real>(x: &Tensor4<T>, k: usize) -> Result<Tensor4<T>> {
    let [n, c, h, w] = x.dims();
    if k == 0 || k > h || k > w {
        return Err(Error::invalid(format!(
            "bin size {k} must be between 1 and the spatial extent {h}x{w}"
        )));
    }
    let mut y = Tensor4::zeros([n, c, k, k]);
    for i in 0..n {
        for ch in 0..c {
            for bi in 0..k {
                let (h0, h1) = bin_range(bi, k, h);
                for bj in 0..k {
                    let (w0, w1) = bin_range(bj, k, w);
                    let mut s = T::zero();
                    for hh in h0..h1 {
                        for ww in w0..w1 {
                            s += x.at(i, ch, hh, ww);
                        }
                    }
                    let area = lit::<T>(((h1 - h0) * (w1 - w0)) as f64);
                    y.set(i, ch, bi, bj, s / area);
                }
            }
        }
    }
    Ok(y)
}

pub fn avg_pool_to_bins_backward<T: Real>(dy: &Tensor4<T>, x_dims: [usize; 4]) -> Tensor4<T> {
    let [n, c, h, w] = x_dims;
    let k = dy.h();
    let mut dx = Tensor4::zeros(x_dims);
    for i in 0..n {
        for ch in 0..c {
            for bi in 0..k {
                let (h0, h1) = bin_range(bi, k, h);
                for bj in 0..k {
                    let (w0, w1) = bin_range(bj, k, w);
                    let g = dy.at(i, ch, bi, bj) / lit(((h1 - h0) * (w1 - w0)) as f64);
                    for hh in h0..h1 {
                        for ww in w0..w1 {
                            let o = dx.offset(i, ch, hh, ww);
                            dx.data_mut()[o] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Source taps for one output coordinate: `(lo, hi, frac)` with the value
/// `(1 - frac) src[lo] + frac src[hi]`.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

/// Half-pixel-center mapping `src = (dst + 0.5) in/out - 0.5`, clamped to the
/// valid range.
fn taps<T: Real>(len_in: usize, len_out: usize) -> Vec<Tap<T>> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len_in - 1);
            let hi = (lo + 1).min(len_in - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            Tap {
                lo,
                hi,
                frac: lit(frac),
            }
        })
        .collect()
}

pub fn bilinear_resize<T: Real>(x: &Tensor4<T>, h_out: usize, w_out: usize) -> Result<Tensor4<T>> {
    let [n, c, h, w] = x.dims();
    if h_out == 0 || w_out == 0 {
        return Err(Error::invalid("resize target extent must be at least 1"));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid("cannot resize an empty plane"));
    }
    if (h, w) == (h_out, w_out) {
        return Ok(x.clone());
    }
    let th = taps::<T>(h, h_out);
    let tw = taps::<T>(w, w_out);
    let mut y = Tensor4::zeros([n, c, h_out, w_out]);
    let one = T::one();
    for (src, dst) in x.data().chunks(h * w).zip(y.data_mut().chunks_mut(h_out * w_out)) {
        for (oy, ty) in th.iter().enumerate() {
            let r0 = &src[ty.lo * w..(ty.lo + 1) * w];
            let r1 = &src[ty.hi * w..(ty.hi + 1) * w];
            for (ox, tx) in tw.iter().enumerate() {
                let top = r0[tx.lo] * (one - tx.frac) + r0[tx.hi] * tx.frac;
                let bot = r1[tx.lo] * (one - tx.frac) + r1[tx.hi] * tx.frac;
                dst[oy * w_out + ox] = top * (one - ty.frac) + bot * ty.frac;
            }
        }
    }
    Ok(y)
}

pub fn bilinear_resize_backward<T: Real>(dy: &Tensor4<T>, x_dims: [usize; 4]) -> Tensor4<T> {
    let [_, _, h, w] = x_dims;
    let (h_out, w_out) = (dy.h(), dy.w());
    if (h, w) == (h_out, w_out) {
        return dy.clone();
    }
    let th = taps::<T>(h, h_out);
    let tw = taps::<T>(w, w_out);
    let mut dx = Tensor4::zeros(x_dims);
    let one = T::one();
    for (g, dst) in dy.data().chunks(h_out * w_out).zip(dx.data_mut().chunks_mut(h * w)) {
        for (oy, ty) in th.iter().enumerate() {
            for (ox, tx) in tw.iter().enumerate() {
                let v = g[oy * w_out + ox];
                let (a, b) = (v * (one - ty.frac), v * ty.frac);
                dst[ty.lo * w + tx.lo] += a * (one - tx.frac);
                dst[ty.lo * w + tx.hi] += a * tx.frac;
                dst[ty.hi * w + tx.lo] += b * (one - tx.frac);
                dst[ty.hi * w + tx.hi] += b * tx.frac;
            }
        }
    }
    dx
}
