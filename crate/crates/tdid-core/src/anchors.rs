//! Anchor grid generation and anchor-to-ground-truth assignment.
//!
//! Anchors tile the feature grid: cell `(i, j)` centers its anchors at
//! `((j + 0.5) * stride, (i + 0.5) * stride)` in image pixels, one anchor
//! per (scale, ratio) pair. The flat anchor index is
//! `(i * Wf + j) * A + slot` with `slot = scale_idx * |ratios| + ratio_idx`,
//! matching the channel layout of the prediction heads.

use crate::boxes::{encode_box, iou, Box};
use crate::error::{Error, Result};

/// An anchor overlapping a ground-truth box above this is positive.
pub const POSITIVE_IOU: f64 = 0.6;
/// An anchor whose best overlap is below this (and that is not forced
/// positive) is negative; the band in between is ignored.
pub const NEGATIVE_IOU: f64 = 0.3;

/// The full anchor grid for one feature-map extent.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub boxes: Vec<Box>,
    pub stride: usize,
    pub hf: usize,
    pub wf: usize,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl AnchorSet {
    /// Anchors per feature cell.
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Lay out `Hf * Wf * |scales| * |ratios|` anchors. A scale `s` with aspect
/// ratio `r` spans `s * sqrt(r)` wide by `s / sqrt(r)` tall; anchors may
/// extend beyond the image and are only clipped when decoded.
pub fn generate_anchors(
    hf: usize,
    wf: usize,
    stride: usize,
    scales: &[f64],
    ratios: &[f64],
) -> Result<AnchorSet> {
    if hf == 0 || wf == 0 || stride == 0 {
        return Err(Error::config("anchor grid extents and stride must be positive"));
    }
    if scales.is_empty() || ratios.is_empty() {
        return Err(Error::config("need at least one anchor scale and ratio"));
    }
    if scales.iter().chain(ratios).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::config("anchor scales and ratios must be positive finite"));
    }
    let mut boxes = Vec::with_capacity(hf * wf * scales.len() * ratios.len());
    for i in 0..hf {
        for j in 0..wf {
            let cx = (j as f64 + 0.5) * stride as f64;
            let cy = (i as f64 + 0.5) * stride as f64;
            for &s in scales {
                for &r in ratios {
                    let w = s * r.sqrt();
                    let h = s / r.sqrt();
                    boxes.push(Box {
                        x1: cx - 0.5 * w,
                        y1: cy - 0.5 * h,
                        x2: cx + 0.5 * w,
                        y2: cy + 0.5 * h,
                    });
                }
            }
        }
    }
    Ok(AnchorSet {
        boxes,
        stride,
        hf,
        wf,
        scales: scales.to_vec(),
        ratios: ratios.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Per-anchor training labels with regression targets for the positives.
#[derive(Clone, Debug)]
pub struct AnchorAssignment {
    pub labels: Vec<AnchorLabel>,
    /// Ground-truth index each positive anchor regresses to (its own
    /// highest-IoU ground truth); `None` elsewhere.
    pub matched_gt: Vec<Option<usize>>,
    /// Encoded `(tx, ty, tw, th)` for positive anchors; `None` elsewhere.
    pub targets: Vec<Option<[f64; 4]>>,
}

impl AnchorAssignment {
    pub fn num_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l == AnchorLabel::Positive)
            .count()
    }
}

/// Label every anchor against the ground-truth boxes:
///
/// * positive if its best IoU exceeds [`POSITIVE_IOU`], or if it is the
///   argmax-IoU anchor for some ground truth (so every ground truth gets at
///   least one positive even when nothing clears the threshold);
/// * negative if its best IoU is below [`NEGATIVE_IOU`] and it was not
///   forced positive;
/// * ignored otherwise.
///
/// Ties break toward the lowest index — both the argmax anchor per ground
/// truth and the ground truth matched by an anchor — keeping the labeling
/// deterministic. With no ground truths every anchor is negative.
pub fn assign_anchors(anchors: &AnchorSet, gts: &[Box]) -> AnchorAssignment {
    let n = anchors.len();
    if gts.is_empty() {
        return AnchorAssignment {
            labels: vec![AnchorLabel::Negative; n],
            matched_gt: vec![None; n],
            targets: vec![None; n],
        };
    }

    // Best ground truth per anchor and best anchor per ground truth, both
    // with strict-greater updates so earlier indices win ties.
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![0usize; n];
    let mut gt_best_iou = vec![0.0f64; gts.len()];
    let mut gt_best_anchor = vec![0usize; gts.len()];
    for (ai, anchor) in anchors.boxes.iter().enumerate() {
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best_iou[ai] {
                best_iou[ai] = v;
                best_gt[ai] = gi;
            }
            if v > gt_best_iou[gi] {
                gt_best_iou[gi] = v;
                gt_best_anchor[gi] = ai;
            }
        }
    }

    let mut labels = vec![AnchorLabel::Ignore; n];
    let mut matched_gt = vec![None; n];
    let mut targets = vec![None; n];
    for ai in 0..n {
        if best_iou[ai] > POSITIVE_IOU {
            labels[ai] = AnchorLabel::Positive;
        } else if best_iou[ai] < NEGATIVE_IOU {
            labels[ai] = AnchorLabel::Negative;
        }
    }
    for &ai in &gt_best_anchor {
        labels[ai] = AnchorLabel::Positive;
    }
    for ai in 0..n {
        if labels[ai] == AnchorLabel::Positive {
            matched_gt[ai] = Some(best_gt[ai]);
            targets[ai] = Some(encode_box(&anchors.boxes[ai], &gts[best_gt[ai]]));
        }
    }
    AnchorAssignment {
        labels,
        matched_gt,
        targets,
    }
}
