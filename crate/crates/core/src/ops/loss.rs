//! Pixel-wise softmax cross-entropy.

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};
use crate::tensor::{Real, Tensor4};

/// Channel-wise softmax of `N x C x H x W` logits, computed in `f64` and
/// stored in `T`.
pub fn softmax<T: Real>(logits: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, _, _] = logits.dims();
    let p = logits.plane();
    let mut out = logits.clone();
    let src = logits.data();
    let dst = out.data_mut();
    let mut buf = vec![0.0f64; c];
    for i in 0..n {
        for px in 0..p {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                buf[ch] = src[(i * c + ch) * p + px].to_f64_lossy();
                m = m.max(buf[ch]);
            }
            let mut s = 0.0;
            for v in buf.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for ch in 0..c {
                dst[(i * c + ch) * p + px] = T::from_f64_lossy(buf[ch] / s);
            }
        }
    }
    out
}

pub fn check_labels<T: Real>(logits: &Tensor4<T>, labels: &LabelMap) -> Result<()> {
    let [n, c, h, w] = logits.dims();
    if (labels.n, labels.h, labels.w) != (n, h, w) {
        return Err(Error::shape(
            "cross_entropy",
            format!(
                "logits {n}x{h}x{w} vs labels {}x{}x{}",
                labels.n, labels.h, labels.w
            ),
        ));
    }
    labels.validate(c)
}

/// Output of [`cross_entropy_forward`].
#[derive(Clone, Debug)]
pub struct CeForward<T> {
    pub loss: T,
    /// `-log p(label)` per pixel, zero where ignored.
    pub pixel_loss: Vec<f64>,
    pub probs: Tensor4<T>,
}

/// `sum_p weight_p * (-log softmax(logits_p)[label_p]) / denom`. Pixels with
/// weight zero or the ignore label contribute nothing; `denom == 0` yields a
/// zero loss.
pub fn cross_entropy_forward<T: Real>(
    logits: &Tensor4<T>,
    labels: &LabelMap,
    pixel_weight: &[T],
    denom: T,
) -> Result<CeForward<T>> {
    check_labels(logits, labels)?;
    let [n, c, _, _] = logits.dims();
    let p = logits.plane();
    let src = logits.data();
    let mut pixel_loss = vec![0.0f64; n * p];
    let mut total = 0.0f64;
    for i in 0..n {
        for px in 0..p {
            let y = labels.data[i * p + px];
            if y == IGNORE {
                continue;
            }
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(src[(i * c + ch) * p + px].to_f64_lossy());
            }
            let lse = m + (0..c)
                .map(|ch| (src[(i * c + ch) * p + px].to_f64_lossy() - m).exp())
                .sum::<f64>()
                .ln();
            let l = lse - src[(i * c + y as usize) * p + px].to_f64_lossy();
            pixel_loss[i * p + px] = l;
            total += pixel_weight[i * p + px].to_f64_lossy() * l;
        }
    }
    let loss = if denom > T::zero() {
        T::from_f64_lossy(total / denom.to_f64_lossy())
    } else {
        T::zero()
    };
    Ok(CeForward {
        loss,
        pixel_loss,
        probs: softmax(logits),
    })
}

pub fn cross_entropy_backward<T: Real>(
    probs: &Tensor4<T>,
    labels: &LabelMap,
    pixel_weight: &[T],
    denom: T,
    upstream: T,
) -> Tensor4<T> {
    let [n, c, _, _] = probs.dims();
    let p = probs.plane();
    let mut d = Tensor4::zeros(probs.dims());
    if denom <= T::zero() {
        return d;
    }
    let scale = upstream / denom;
    for i in 0..n {
        for px in 0..p {
            let y = labels.data[i * p + px];
            let wgt = pixel_weight[i * p + px];
            if y == IGNORE || wgt == T::zero() {
                continue;
            }
            let k = scale * wgt;
            for ch in 0..c {
                let o = (i * c + ch) * p + px;
                let target = if ch == y as usize { T::one() } else { T::zero() };
                d.data_mut()[o] = k * (probs.data()[o] - target);
            }
        }
    }
    d
}
