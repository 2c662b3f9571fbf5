//! Batch normalization over the (N, H, W) axes of each channel.

use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor4};

/// Per-channel statistics saved by a forward pass for use in backward.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Unbiased batch variance, for the running estimate. Empty in eval mode.
    pub batch_var: Vec<T>,
    pub train: bool,
}

fn check<T: Real>(x: &Tensor4<T>, gamma: &[T], beta: &[T]) -> Result<()> {
    if gamma.len() != x.c() || beta.len() != x.c() {
        return Err(Error::shape(
            "batchnorm",
            format!("input has {} channels, affine has {}", x.c(), gamma.len()),
        ));
    }
    Ok(())
}

fn apply<T: Real>(x: &Tensor4<T>, gamma: &[T], beta: &[T], mean: &[T], inv_std: &[T]) -> Tensor4<T> {
    let [n, c, _, _] = x.dims();
    let p = x.plane();
    let mut y = x.clone();
    for i in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            let (m, b) = (mean[ch], beta[ch]);
            let base = (i * c + ch) * p;
            for v in &mut y.data_mut()[base..base + p] {
                *v = (*v - m) * scale + b;
            }
        }
    }
    y
}

/// Normalizes with the batch statistics.
pub fn batchnorm_train<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<(Tensor4<T>, BnSaved<T>)> {
    check(x, gamma, beta)?;
    let [n, c, _, _] = x.dims();
    let p = x.plane();
    let count = n * p;
    if count == 0 {
        return Err(Error::shape("batchnorm", "empty batch"));
    }
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * p;
            s += x.data()[base..base + p].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        }
        let m = s / count as f64;
        let mut ss = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * p;
            ss += x.data()[base..base + p]
                .iter()
                .map(|v| (v.to_f64_lossy() - m).powi(2))
                .sum::<f64>();
        }
        mean[ch] = lit(m);
        var[ch] = lit(ss / count as f64);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| (v + lit(eps)).sqrt().recip()).collect();
    let unbias = if count > 1 {
        count as f64 / (count - 1) as f64
    } else {
        1.0
    };
    let batch_var = var.iter().map(|&v| v * lit(unbias)).collect();
    let y = apply(x, gamma, beta, &mean, &inv_std);
    Ok((
        y,
        BnSaved {
            mean,
            inv_std,
            batch_var,
            train: true,
        },
    ))
}

/// Normalizes with stored running statistics.
pub fn batchnorm_eval<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<(Tensor4<T>, BnSaved<T>)> {
    check(x, gamma, beta)?;
    if running_mean.len() != x.c() || running_var.len() != x.c() {
        return Err(Error::shape("batchnorm", "running statistics length differs from channels"));
    }
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|&v| (v + lit(eps)).sqrt().recip())
        .collect();
    let y = apply(x, gamma, beta, running_mean, &inv_std);
    Ok((
        y,
        BnSaved {
            mean: running_mean.to_vec(),
            inv_std,
            batch_var: Vec::new(),
            train: false,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    saved: &BnSaved<T>,
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let [n, c, _, _] = x.dims();
    let p = x.plane();
    let count = lit::<T>((n * p) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (m, is) = (saved.mean[ch], saved.inv_std[ch]);
        for i in 0..n {
            let base = (i * c + ch) * p;
            for (xv, g) in x.data()[base..base + p].iter().zip(&dy.data()[base..base + p]) {
                dgamma[ch] += *g * (*xv - m) * is;
                dbeta[ch] += *g;
            }
        }
    }
    let mut dx = Tensor4::zeros(x.dims());
    for ch in 0..c {
        let (m, is, ga) = (saved.mean[ch], saved.inv_std[ch], gamma[ch]);
        for i in 0..n {
            let base = (i * c + ch) * p;
            let xs = &x.data()[base..base + p];
            let gs = &dy.data()[base..base + p];
            let out = &mut dx.data_mut()[base..base + p];
            if saved.train {
                // dx = gamma * inv_std / M * (M dy - sum(dy) - xhat * sum(dy * xhat))
                let k = ga * is / count;
                for ((o, xv), g) in out.iter_mut().zip(xs).zip(gs) {
                    let xhat = (*xv - m) * is;
                    *o = k * (count * *g - dbeta[ch] - xhat * dgamma[ch]);
                }
            } else {
                for (o, g) in out.iter_mut().zip(gs) {
                    *o = *g * ga * is;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
