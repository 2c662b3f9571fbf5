//! Confusion-matrix metrics and boundary F-score.

use std::fmt;

use crate::data::boundary_mask;
use crate::labels::IGNORE;

/// `C x C` pixel counts, rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Accumulates one prediction. Ground-truth `IGNORE` pixels are skipped.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) {
        debug_assert_eq!(pred.len(), gt.len());
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE || g as usize >= self.classes || p as usize >= self.classes {
                continue;
            }
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class appears in
    /// neither prediction nor ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.at(c, c);
                let fn_: u64 = (0..self.classes).map(|p| self.at(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.classes).map(|g| self.at(g, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over the classes present in prediction or ground truth.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.classes).map(|c| self.at(c, c)).sum::<u64>() as f64 / total as f64
    }
}

/// Counts behind a boundary F-score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BoundaryCounts {
    pub pred: u64,
    pub pred_matched: u64,
    pub gt: u64,
    pub gt_matched: u64,
}

impl BoundaryCounts {
    pub fn merge(&mut self, o: &BoundaryCounts) {
        self.pred += o.pred;
        self.pred_matched += o.pred_matched;
        self.gt += o.gt;
        self.gt_matched += o.gt_matched;
    }

    pub fn precision(&self) -> f64 {
        if self.pred == 0 {
            0.0
        } else {
            self.pred_matched as f64 / self.pred as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gt == 0 {
            0.0
        } else {
            self.gt_matched as f64 / self.gt as f64
        }
    }

    /// `2PR / (P + R)`; 1 when both boundary sets are empty, 0 when only one
    /// is.
    pub fn fscore(&self) -> f64 {
        match (self.pred, self.gt) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            _ => {
                let (p, r) = (self.precision(), self.recall());
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            }
        }
    }
}

/// Square (Chebyshev) dilation by `radius`.
fn dilate(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            rows[y * w + x] = mask[y * w + x0..=y * w + x1].iter().any(|b| *b);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (y0..=y1).any(|yy| rows[yy * w + x]);
        }
    }
    out
}

/// Boundary pixels are those whose 4-neighbour carries a different label.
/// A boundary pixel counts as matched when the other map has a boundary
/// pixel within Chebyshev distance `tolerance`. Prediction pixels under
/// ground-truth `IGNORE` take the ignore label so padding adds no edges.
pub fn boundary_counts(pred: &[u8], gt: &[u8], h: usize, w: usize, tolerance: usize) -> BoundaryCounts {
    let masked: Vec<u8> = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| if g == IGNORE { IGNORE } else { p })
        .collect();
    let bp = boundary_mask(&masked, h, w);
    let bg = boundary_mask(gt, h, w);
    let near_p = dilate(&bp, h, w, tolerance);
    let near_g = dilate(&bg, h, w, tolerance);
    let count = |m: &[bool]| m.iter().filter(|b| **b).count() as u64;
    let both = |a: &[bool], b: &[bool]| a.iter().zip(b).filter(|(x, y)| **x && **y).count() as u64;
    BoundaryCounts {
        pred: count(&bp),
        pred_matched: both(&bp, &near_g),
        gt: count(&bg),
        gt_matched: both(&bg, &near_p),
    }
}

pub fn boundary_fscore(pred: &[u8], gt: &[u8], h: usize, w: usize, tolerance: usize) -> f64 {
    boundary_counts(pred, gt, h, w, tolerance).fscore()
}

pub const BOUNDARY_TOLERANCE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub confusion: Confusion,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_acc: f64,
    pub boundary: BoundaryCounts,
    pub boundary_f: f64,
}

impl Metrics {
    pub fn from_parts(confusion: Confusion, boundary: BoundaryCounts) -> Self {
        Self {
            per_class_iou: confusion.iou(),
            miou: confusion.miou(),
            pixel_acc: confusion.pixel_accuracy(),
            boundary_f: boundary.fscore(),
            confusion,
            boundary,
        }
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "class  iou")?;
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => writeln!(f, "{c:>5}  {:.4}", v)?,
                None => writeln!(f, "{c:>5}  -")?,
            }
        }
        writeln!(f, "miou        {:.4}", self.miou)?;
        writeln!(f, "pixel_acc   {:.4}", self.pixel_acc)?;
        writeln!(
            f,
            "boundary_f  {:.4} (precision {:.4}, recall {:.4}, tolerance {} px)",
            self.boundary_f,
            self.boundary.precision(),
            self.boundary.recall(),
            BOUNDARY_TOLERANCE
        )
    }
}
