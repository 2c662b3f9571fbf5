//! Inference and dataset evaluation, with optional multi-scale and flip
//! testing.

use crate::autograd::Graph;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{boundary_counts, BoundaryCounts, Confusion, Metrics, BOUNDARY_TOLERANCE};
use crate::network::Network;
use crate::ops::bilinear_resize;
use crate::ops::loss::softmax;
use crate::par;
use crate::tensor::Tensor4;

pub const MS_SCALES: [f64; 5] = [0.75, 1.0, 1.25, 1.5, 1.75];

/// Eval-mode logits for `N x 3 x H x W` images at input resolution.
pub fn logits(net: &mut Network<f32>, images: &Tensor4<f32>) -> Result<Tensor4<f32>> {
    let mut graph = Graph::new();
    let out = net.forward(&mut graph, images, false)?;
    Ok(graph.value(out.logits).clone())
}

/// Class probabilities averaged over `scales` and, with `flip`, over the
/// mirrored input. At each scale the softmax probabilities are resized
/// bilinearly back to the input extent before averaging.
pub fn predict_probs(net: &mut Network<f32>, image: &Tensor4<f32>, scales: &[f64], flip: bool) -> Result<Tensor4<f32>> {
    if scales.is_empty() {
        return Err(Error::invalid("no test scales"));
    }
    let [_, _, h, w] = image.dims();
    let mut acc: Option<Tensor4<f32>> = None;
    let mut count = 0usize;
    for &s in scales {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!("test scale {s} must be positive")));
        }
        let (sh, sw) = (
            ((h as f64 * s).round() as usize).max(1),
            ((w as f64 * s).round() as usize).max(1),
        );
        let scaled = bilinear_resize(image, sh, sw)?;
        let views: &[bool] = if flip { &[false, true] } else { &[false] };
        for &mirrored in views {
            let input = if mirrored { scaled.hflip() } else { scaled.clone() };
            let mut p = bilinear_resize(&softmax(&logits(net, &input)?), h, w)?;
            if mirrored {
                p = p.hflip();
            }
            match acc.as_mut() {
                Some(a) => a.axpy(1.0, &p),
                None => acc = Some(p),
            }
            count += 1;
        }
    }
    let mut acc = acc.expect("at least one view");
    if count > 1 {
        let inv = 1.0 / count as f32;
        acc.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(acc)
}

/// Per-pixel argmax over classes; ties go to the lower class id.
pub fn argmax(probs: &Tensor4<f32>) -> Vec<u8> {
    let [n, c, h, w] = probs.dims();
    let plane = h * w;
    let mut out = vec![0u8; n * plane];
    for i in 0..n {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = f32::NEG_INFINITY;
            for k in 0..c {
                let v = probs.data()[(i * c + k) * plane + p];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            out[i * plane + p] = best as u8;
        }
    }
    out
}

/// Predicted label map of one `1 x 3 x H x W` image.
pub fn predict(net: &mut Network<f32>, image: &Tensor4<f32>, scales: &[f64], flip: bool) -> Result<Vec<u8>> {
    Ok(argmax(&predict_probs(net, image, scales, flip)?))
}

/// Confusion matrix, mIoU, pixel accuracy and boundary F-score over
/// `samples`. Images are processed in parallel and reduced in order.
pub fn evaluate(net: &Network<f32>, samples: &[Sample], scales: &[f64], flip: bool) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let classes = net.cfg.num_classes;
    let per_image = par::map_indices(samples.len(), |i| -> Result<(Confusion, BoundaryCounts)> {
        let s = &samples[i];
        s.labels.validate(classes)?;
        let mut local = net.clone();
        let pred = predict(&mut local, &s.image, scales, flip)?;
        let mut c = Confusion::new(classes);
        c.add(&pred, &s.labels.data);
        let b = boundary_counts(&pred, &s.labels.data, s.height(), s.width(), BOUNDARY_TOLERANCE);
        Ok((c, b))
    });
    let mut confusion = Confusion::new(classes);
    let mut boundary = BoundaryCounts::default();
    for r in per_image {
        let (c, b) = r?;
        confusion.merge(&c);
        boundary.merge(&b);
    }
    Ok(Metrics::from_parts(confusion, boundary))
}
