//! Offset-guided bilinear sampling.
//!
//! For a feature map `F` (`N x C x H x W`) and an offset field `delta`
//! (`N x 2 x H x W`, channel 0 vertical, channel 1 horizontal, in pixels),
//! the output at `(h, w)` samples `F` at `(h + delta0, w + delta1)` with the
//! bilinear kernel `max(0, 1 - |.|)` along each axis. Taps outside the grid
//! read zero. The offset at a position is shared by every channel.
//!
//! The kernel evaluates the four non-zero taps directly. [`align_oracle`]
//! keeps the literal sum over every source pixel for testing.

use crate::error::{Error, Result};
use crate::ops::sample::bilinear_resize;
use crate::par;
use crate::tensor::{Real, Tensor4};

fn check<T: Real>(f: &Tensor4<T>, delta: &Tensor4<T>) -> Result<()> {
    let [n, _, h, w] = f.dims();
    let [dn, dc, dh, dw] = delta.dims();
    if dc != 2 {
        return Err(Error::shape(
            "align_sample",
            format!("offset field must have 2 channels, got {dc}"),
        ));
    }
    if (dn, dh, dw) != (n, h, w) {
        return Err(Error::shape(
            "align_sample",
            format!("feature {:?} vs offsets {:?}", f.dims(), delta.dims()),
        ));
    }
    Ok(())
}

/// One axis of the bilinear footprint: the lower tap index (may be out of
/// range) and the fractional distance past it.
#[derive(Clone, Copy)]
struct Axis<T> {
    lo: isize,
    frac: T,
}

impl<T: Real> Axis<T> {
    #[inline]
    fn new(base: usize, offset: T) -> Self {
        let pos = T::from_usize(base).unwrap() + offset;
        let fl = pos.floor();
        Self {
            lo: fl.to_isize().unwrap_or(isize::MIN / 2),
            frac: pos - fl,
        }
    }

    /// `(index, weight)` for the two taps that are inside `0..len` and carry a
    /// non-zero weight.
    #[inline]
    fn taps(&self, len: usize) -> [Option<(usize, T)>; 2] {
        let one = T::one();
        let pick = |idx: isize, wgt: T| {
            (idx >= 0 && (idx as usize) < len && wgt != T::zero()).then_some((idx as usize, wgt))
        };
        [pick(self.lo, one - self.frac), pick(self.lo + 1, self.frac)]
    }

    /// Indices of both taps of the cell, in range or not, for the derivative
    /// with respect to the sampling position.
    #[inline]
    fn cell(&self, len: usize) -> [Option<usize>; 2] {
        let inside = |idx: isize| (idx >= 0 && (idx as usize) < len).then_some(idx as usize);
        [inside(self.lo), inside(self.lo + 1)]
    }
}

/// Offset-guided bilinear sampling of `f` by `delta`.
pub fn align_sample<T: Real>(f: &Tensor4<T>, delta: &Tensor4<T>) -> Result<Tensor4<T>> {
    check(f, delta)?;
    let [_, c, h, w] = f.dims();
    let plane = h * w;
    let mut out = Tensor4::zeros(f.dims());
    let fs = f.data();
    let ds = delta.data();
    par::for_each_chunk(out.data_mut(), c * plane, |i, dst| {
        let src = &fs[i * c * plane..(i + 1) * c * plane];
        let off = &ds[i * 2 * plane..(i + 1) * 2 * plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let ay = Axis::new(y, off[p]);
                let ax = Axis::new(x, off[plane + p]);
                let ty = ay.taps(h);
                let tx = ax.taps(w);
                for ch in 0..c {
                    let sp = &src[ch * plane..(ch + 1) * plane];
                    // -0.0 is the additive identity, so a single unit tap
                    // reproduces the source value bit for bit.
                    let mut acc = -T::zero();
                    for &(yy, wy) in ty.iter().flatten() {
                        for &(xx, wx) in tx.iter().flatten() {
                            acc += wy * wx * sp[yy * w + xx];
                        }
                    }
                    dst[ch * plane + p] = acc;
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`align_sample`] with respect to the features and offsets.
///
/// The kernel `max(0, 1 - |d|)` is not differentiable where the sampling
/// position lands exactly on a grid line. There the derivative is taken from
/// the cell `[floor(pos), floor(pos) + 1]`, i.e. the right derivative, so a
/// zero offset field still receives the gradient `F[y+1] - F[y]`.
pub fn align_sample_backward<T: Real>(
    f: &Tensor4<T>,
    delta: &Tensor4<T>,
    d_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    check(f, delta)?;
    if d_out.dims() != f.dims() {
        return Err(Error::shape(
            "align_sample_backward",
            format!("upstream {:?} vs feature {:?}", d_out.dims(), f.dims()),
        ));
    }
    let [n, c, h, w] = f.dims();
    let plane = h * w;
    let fs = f.data();
    let ds = delta.data();
    let gs = d_out.data();
    let parts = par::map_indices(n, |i| {
        let src = &fs[i * c * plane..(i + 1) * c * plane];
        let off = &ds[i * 2 * plane..(i + 1) * 2 * plane];
        let g = &gs[i * c * plane..(i + 1) * c * plane];
        let mut df = vec![T::zero(); c * plane];
        let mut dd = vec![T::zero(); 2 * plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let ay = Axis::new(y, off[p]);
                let ax = Axis::new(x, off[plane + p]);
                let ty = ay.taps(h);
                let tx = ax.taps(w);
                let [cy0, cy1] = ay.cell(h);
                let [cx0, cx1] = ax.cell(w);
                let one = T::one();
                let (wy0, wy1) = (one - ay.frac, ay.frac);
                let (wx0, wx1) = (one - ax.frac, ax.frac);
                let mut d_vert = T::zero();
                let mut d_horz = T::zero();
                for ch in 0..c {
                    let gv = g[ch * plane + p];
                    if gv == T::zero() {
                        continue;
                    }
                    let sp = &src[ch * plane..(ch + 1) * plane];
                    let dfp = &mut df[ch * plane..(ch + 1) * plane];
                    for &(yy, wy) in ty.iter().flatten() {
                        for &(xx, wx) in tx.iter().flatten() {
                            dfp[yy * w + xx] += gv * wy * wx;
                        }
                    }
                    let at = |yy: Option<usize>, xx: Option<usize>| match (yy, xx) {
                        (Some(a), Some(b)) => sp[a * w + b],
                        _ => T::zero(),
                    };
                    let (v00, v01, v10, v11) = (at(cy0, cx0), at(cy0, cx1), at(cy1, cx0), at(cy1, cx1));
                    d_vert += gv * (wx0 * (v10 - v00) + wx1 * (v11 - v01));
                    d_horz += gv * (wy0 * (v01 - v00) + wy1 * (v11 - v10));
                }
                dd[p] = d_vert;
                dd[plane + p] = d_horz;
            }
        }
        (df, dd)
    });
    let mut df = Vec::with_capacity(n * c * plane);
    let mut dd = Vec::with_capacity(n * 2 * plane);
    for (a, b) in parts {
        df.extend(a);
        dd.extend(b);
    }
    Ok((
        Tensor4::from_vec([n, c, h, w], df)?,
        Tensor4::from_vec([n, 2, h, w], dd)?,
    ))
}

/// Reference evaluation of the alignment sum over every source pixel,
/// with 1-based grid coordinates, in `f64`. Quadratic in the plane size; for
/// tests only.
pub fn align_oracle(f: &Tensor4<f64>, delta: &Tensor4<f64>) -> Tensor4<f64> {
    let [n, c, h, w] = f.dims();
    let kernel = |d: f64| (1.0 - d.abs()).max(0.0);
    Tensor4::from_fn([n, c, h, w], |i, ch, y, x| {
        let (hh, ww) = ((y + 1) as f64, (x + 1) as f64);
        let (d1, d2) = (delta.at(i, 0, y, x), delta.at(i, 1, y, x));
        let mut acc = 0.0;
        for sy in 1..=h {
            for sx in 1..=w {
                acc += f.at(i, ch, sy - 1, sx - 1)
                    * kernel(hh + d1 - sy as f64)
                    * kernel(ww + d2 - sx as f64);
            }
        }
        acc
    })
}

/// Regular-grid bilinear upsampling by 2, 4 or 8.
pub fn upsample_rgs<T: Real>(f: &Tensor4<T>, factor: usize) -> Result<Tensor4<T>> {
    if !matches!(factor, 2 | 4 | 8) {
        return Err(Error::invalid(format!(
            "upsampling factor {factor} is not one of 2, 4, 8"
        )));
    }
    bilinear_resize(f, f.h() * factor, f.w() * factor)
}
