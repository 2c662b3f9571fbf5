//! Segmentation losses on top of the tape's weighted cross-entropy node.

use crate::autograd::{Graph, LossOutput, Var};
use crate::error::Result;
use crate::labels::{LabelMap, IGNORE};
use crate::ops::loss::{check_labels, softmax};
use crate::tensor::{lit, Real};

pub const CLASS_WEIGHT_MIN: f64 = 0.1;
pub const CLASS_WEIGHT_MAX: f64 = 10.0;
pub const OHEM_KEEP_THRESH: f64 = 0.7;
pub const OHEM_MIN_KEEP_FRACTION: f64 = 1.0 / 16.0;

/// Mean cross-entropy over non-ignored pixels, each pixel scaled by the
/// weight of its class (unit weights when `class_weights` is `None`).
pub fn softmax_cross_entropy<T: Real>(
    graph: &mut Graph<T>,
    logits: Var,
    labels: &LabelMap,
    class_weights: Option<&[f64]>,
) -> Result<LossOutput> {
    check_labels(graph.value(logits), labels)?;
    let mut valid = 0usize;
    let weights: Vec<T> = labels
        .data
        .iter()
        .map(|&y| {
            if y == IGNORE {
                T::zero()
            } else {
                valid += 1;
                lit(class_weights.map_or(1.0, |w| w[y as usize]))
            }
        })
        .collect();
    graph.cross_entropy(logits, labels, weights, lit(valid as f64))
}

/// Median-frequency class weights `median(freq) / freq_c`, clipped to
/// `[0.1, 10]`. A class that never occurs gets the ceiling.
pub fn median_frequency_weights(freq: &[f64]) -> Vec<f64> {
    let mut sorted = freq.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = match sorted.len() {
        0 => return Vec::new(),
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    freq.iter()
        .map(|&f| {
            if f <= 0.0 {
                CLASS_WEIGHT_MAX
            } else {
                (median / f).clamp(CLASS_WEIGHT_MIN, CLASS_WEIGHT_MAX)
            }
        })
        .collect()
}

/// Cross-entropy with median-frequency class weights derived from `freq`.
pub fn class_balanced_ce<T: Real>(
    graph: &mut Graph<T>,
    logits: Var,
    labels: &LabelMap,
    freq: &[f64],
) -> Result<LossOutput> {
    let w = median_frequency_weights(freq);
    softmax_cross_entropy(graph, logits, labels, Some(&w))
}

/// Chooses the pixels an OHEM loss averages over.
///
/// A valid pixel is kept when its true-class probability is below
/// `keep_thresh` (every valid pixel is kept when `keep_thresh >= 1`). If that
/// leaves fewer than `ceil(min_keep_fraction * valid)` pixels, exactly that
/// many of the lowest-probability pixels are kept instead. Ties are broken by
/// pixel index.
pub fn ohem_select(true_prob: &[f64], valid: &[bool], keep_thresh: f64, min_keep_fraction: f64) -> Vec<bool> {
    let n_valid = valid.iter().filter(|v| **v).count();
    if n_valid == 0 {
        return vec![false; valid.len()];
    }
    if keep_thresh >= 1.0 {
        return valid.to_vec();
    }
    let keep: Vec<bool> = true_prob
        .iter()
        .zip(valid)
        .map(|(p, v)| *v && *p < keep_thresh)
        .collect();
    let min_keep = ((min_keep_fraction * n_valid as f64).ceil() as usize).clamp(1, n_valid);
    if keep.iter().filter(|k| **k).count() >= min_keep {
        return keep;
    }
    let mut order: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    order.sort_by(|&a, &b| true_prob[a].total_cmp(&true_prob[b]).then(a.cmp(&b)));
    let mut out = vec![false; valid.len()];
    for &i in &order[..min_keep] {
        out[i] = true;
    }
    out
}

/// Online hard example mining: mean cross-entropy over the pixels chosen by
/// [`ohem_select`]. No valid pixels gives a zero loss.
pub fn ohem_ce<T: Real>(
    graph: &mut Graph<T>,
    logits: Var,
    labels: &LabelMap,
    keep_thresh: f64,
    min_keep_fraction: f64,
) -> Result<LossOutput> {
    check_labels(graph.value(logits), labels)?;
    let probs = softmax(graph.value(logits));
    let [n, c, h, w] = probs.dims();
    let plane = h * w;
    let mut true_prob = vec![0.0; labels.data.len()];
    let mut valid = vec![false; labels.data.len()];
    for i in 0..n {
        for p in 0..plane {
            let y = labels.data[i * plane + p];
            if y != IGNORE {
                valid[i * plane + p] = true;
                true_prob[i * plane + p] = probs.data()[(i * c + y as usize) * plane + p].to_f64_lossy();
            }
        }
    }
    let keep = ohem_select(&true_prob, &valid, keep_thresh, min_keep_fraction);
    let kept = keep.iter().filter(|k| **k).count();
    let weights = keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect();
    graph.cross_entropy(logits, labels, weights, lit(kept as f64))
}
