//! Training loss over the anchor grid: sampled two-class cross-entropy plus
//! smooth-L1 box regression on the positives.

use crate::anchors::{AnchorAssignment, AnchorLabel};
use crate::error::{Error, Result};
use crate::graph::{ClsSample, Graph, RegSample, Var};
use crate::model::HeadOutput;
use crate::rng::SplitMix64;
use crate::tensor::Scalar;

pub use crate::graph::kernels::{smooth_l1, smooth_l1_grad};

/// At most this many anchors contribute to the classification loss.
pub const MAX_SAMPLES: usize = 256;
/// At most half the sample budget goes to positives; negatives fill the rest.
pub const MAX_POSITIVES: usize = 128;

/// Scalar summary of one loss evaluation. `total_var` stays on the graph
/// for the backward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub cls_loss: f64,
    /// Regression term including the configured weighting, so
    /// `total = cls_loss + reg_loss` always holds.
    pub reg_loss: f64,
    pub total: f64,
    pub num_pos: usize,
    pub num_neg: usize,
    pub total_var: Var,
}

/// Build the training loss on the session graph:
///
/// * sample up to [`MAX_SAMPLES`] anchors — positives first (capped at
///   [`MAX_POSITIVES`]), negatives filling the remainder — uniformly via a
///   generator seeded with `sample_seed`, so a seed pins the exact batch;
/// * classification: mean two-class cross-entropy over the sampled anchors;
/// * regression: smooth-L1 between predicted deltas and encoded targets,
///   summed over the four components of each sampled positive and divided
///   by `max(1, num_pos)`, scaled by `reg_weight`.
///
/// Ignore-labeled anchors contribute nothing anywhere.
pub fn detection_loss<T: Scalar>(
    graph: &mut Graph<T>,
    head: &HeadOutput,
    assignment: &AnchorAssignment,
    sample_seed: u64,
    reg_weight: f64,
) -> Result<LossBreakdown> {
    let expected = head.hf * head.wf * head.anchors_per_cell;
    if assignment.labels.len() != expected {
        return Err(Error::shape(format!(
            "assignment covers {} anchors but the head grid has {expected}",
            assignment.labels.len()
        )));
    }

    let positives: Vec<usize> = (0..expected)
        .filter(|&i| assignment.labels[i] == AnchorLabel::Positive)
        .collect();
    let negatives: Vec<usize> = (0..expected)
        .filter(|&i| assignment.labels[i] == AnchorLabel::Negative)
        .collect();

    let mut rng = SplitMix64::new(sample_seed);
    let pos_sample = rng.sample(&positives, MAX_POSITIVES);
    let neg_sample = rng.sample(&negatives, MAX_SAMPLES - pos_sample.len());
    let num_pos = pos_sample.len();
    let num_neg = neg_sample.len();

    let mut cls_samples = Vec::with_capacity(num_pos + num_neg);
    let mut reg_samples = Vec::with_capacity(num_pos);
    for &anchor in &pos_sample {
        cls_samples.push(ClsSample {
            anchor,
            is_positive: true,
        });
        let targets = assignment.targets[anchor]
            .ok_or_else(|| Error::shape(format!("positive anchor {anchor} has no targets")))?;
        reg_samples.push(RegSample { anchor, targets });
    }
    for &anchor in &neg_sample {
        cls_samples.push(ClsSample {
            anchor,
            is_positive: false,
        });
    }

    let cls_var = graph.cross_entropy_two_class(head.cls_logits, cls_samples, head.anchors_per_cell)?;
    let reg_raw = graph.smooth_l1_reg(head.reg_deltas, reg_samples, head.anchors_per_cell)?;
    let reg_var = if reg_weight == 1.0 {
        reg_raw
    } else {
        graph.scale(reg_raw, reg_weight)
    };
    let total_var = graph.add(cls_var, reg_var)?;

    let cls_loss = graph.value(cls_var).data()[0].to_f64();
    let reg_loss = graph.value(reg_var).data()[0].to_f64();
    let total = graph.value(total_var).data()[0].to_f64();
    if !total.is_finite() {
        return Err(Error::config(format!(
            "non-finite loss: cls {cls_loss}, reg {reg_loss}"
        )));
    }
    Ok(LossBreakdown {
        cls_loss,
        reg_loss,
        total,
        num_pos,
        num_neg,
        total_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{assign_anchors, generate_anchors};
    use crate::boxes::Box;
    use crate::tensor::Tensor;

    /// Hand-buildable head: logits and deltas straight from tensors.
    fn fixed_head(
        graph: &mut Graph<f64>,
        a: usize,
        hf: usize,
        wf: usize,
        cls: Vec<f64>,
        reg: Vec<f64>,
    ) -> HeadOutput {
        let cls_logits = graph.leaf(Tensor::new(vec![1, 2 * a, hf, wf], cls).unwrap());
        let reg_deltas = graph.leaf(Tensor::new(vec![1, 4 * a, hf, wf], reg).unwrap());
        HeadOutput {
            cls_logits,
            reg_deltas,
            feature_stride: 8,
            hf,
            wf,
            anchors_per_cell: a,
        }
    }

    #[test]
    fn confident_correct_predictions_give_tiny_loss() {
        // 2x2 grid, 1 anchor/cell, anchor 0 positive (exact match), rest
        // negative. Logit margin 10 toward the right class everywhere.
        let set = generate_anchors(2, 2, 8, &[8.0], &[1.0]).unwrap();
        let gt = set.boxes[0];
        let asg = assign_anchors(&set, &[gt]);
        let mut g: Graph<f64> = Graph::new();
        // Channel layout [1, 2, 2, 2]: channel 0 = background logit,
        // channel 1 = foreground logit, each 2x2 spatial.
        let cls = vec![
            0.0, 10.0, 10.0, 10.0, // bg logits per cell
            10.0, 0.0, 0.0, 0.0, // fg logits per cell
        ];
        let reg = vec![0.0; 16];
        let head = fixed_head(&mut g, 1, 2, 2, cls, reg);
        let loss = detection_loss(&mut g, &head, &asg, 0, 1.0).unwrap();
        assert!(loss.cls_loss < 1e-4, "cls {}", loss.cls_loss);
        // Positive anchor coincides with the gt: targets all zero, deltas
        // all zero, so regression is exactly zero.
        assert_eq!(loss.reg_loss, 0.0);
        assert_eq!(loss.num_pos, 1);
        assert_eq!(loss.num_neg, 3);
    }

    #[test]
    fn no_positives_means_zero_regression() {
        let set = generate_anchors(2, 2, 8, &[8.0], &[1.0]).unwrap();
        let asg = assign_anchors(&set, &[]);
        let mut g: Graph<f64> = Graph::new();
        let head = fixed_head(&mut g, 1, 2, 2, vec![0.3; 8], vec![0.7; 16]);
        let loss = detection_loss(&mut g, &head, &asg, 9, 1.0).unwrap();
        assert_eq!(loss.reg_loss, 0.0);
        assert_eq!(loss.num_pos, 0);
        assert_eq!(loss.num_neg, 4);
        assert!((loss.total - loss.cls_loss).abs() < 1e-15);
    }

    #[test]
    fn matches_hand_rolled_scalar_recomputation() {
        // 1x2 grid, one anchor per cell. Anchor 1 positive, anchor 0
        // negative (gt sits exactly on anchor 1).
        let set = generate_anchors(1, 2, 8, &[8.0], &[1.0]).unwrap();
        let gt = Box::new(10.0, 1.0, 15.0, 7.0).unwrap();
        let asg = assign_anchors(&set, &[gt]);
        assert_eq!(asg.num_positive(), 1);
        let mut g: Graph<f64> = Graph::new();
        let cls = vec![0.2, -0.4, -0.1, 0.9]; // bg: cells 0,1; fg: cells 0,1
        let reg = vec![0.1, 0.3, -0.2, 0.5, 2.0, -0.7, 0.4, 1.1];
        let head = fixed_head(&mut g, 1, 1, 2, cls.clone(), reg.clone());
        let loss = detection_loss(&mut g, &head, &asg, 3, 1.0).unwrap();

        // Cross-entropy recomputed with plain scalar arithmetic.
        let ce = |bg: f64, fg: f64, positive: bool| -> f64 {
            let m = bg.max(fg);
            let z = (bg - m).exp() + (fg - m).exp();
            let picked = if positive { fg } else { bg };
            -(picked - m - z.ln())
        };
        let expect_cls = (ce(0.2, -0.1, false) + ce(-0.4, 0.9, true)) / 2.0;
        assert!((loss.cls_loss - expect_cls).abs() < 1e-12);

        // Regression: anchor 1 reads channel-major elements at cell 1.
        let t = asg.targets[1].unwrap();
        let pred = [reg[1], reg[3], reg[5], reg[7]];
        let expect_reg: f64 = (0..4).map(|i| smooth_l1(pred[i] - t[i])).sum();
        assert!((loss.reg_loss - expect_reg).abs() < 1e-12);
        assert!((loss.total - (expect_cls + expect_reg)).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let set = generate_anchors(8, 8, 8, &[8.0, 16.0], &[0.5, 1.0, 2.0]).unwrap();
        let gt = Box::new(8.0, 8.0, 24.0, 24.0).unwrap();
        let asg = assign_anchors(&set, &[gt]);
        let run = |seed: u64| -> (f64, usize, usize) {
            let mut g: Graph<f64> = Graph::new();
            let n = set.per_cell();
            let cls: Vec<f64> = (0..2 * n * 64).map(|i| (i as f64 * 0.37).sin()).collect();
            let reg: Vec<f64> = (0..4 * n * 64).map(|i| (i as f64 * 0.21).cos()).collect();
            let head = fixed_head(&mut g, n, 8, 8, cls, reg);
            let l = detection_loss(&mut g, &head, &asg, seed, 1.0).unwrap();
            (l.total, l.num_pos, l.num_neg)
        };
        assert_eq!(run(42), run(42));
        // 384 candidate negatives; different seeds draw different batches.
        assert_ne!(run(42).0, run(43).0);
    }

    #[test]
    fn reg_weight_scales_only_the_regression_term() {
        let set = generate_anchors(1, 2, 8, &[8.0], &[1.0]).unwrap();
        let gt = Box::new(9.0, 1.0, 15.0, 7.0).unwrap();
        let asg = assign_anchors(&set, &[gt]);
        let build = |weight: f64| -> (f64, f64, f64) {
            let mut g: Graph<f64> = Graph::new();
            let head = fixed_head(
                &mut g,
                1,
                1,
                2,
                vec![0.1, 0.2, 0.3, 0.4],
                vec![0.5; 8],
            );
            let l = detection_loss(&mut g, &head, &asg, 0, weight).unwrap();
            (l.cls_loss, l.reg_loss, l.total)
        };
        let (c1, r1, t1) = build(1.0);
        let (c2, r2, t2) = build(2.0);
        assert_eq!(c1, c2);
        assert!((r2 - 2.0 * r1).abs() < 1e-12);
        assert!((t2 - (c2 + r2)).abs() < 1e-12);
        assert!((t1 - (c1 + r1)).abs() < 1e-12);
    }

    #[test]
    fn positive_cap_honored_with_many_positives() {
        // Dense grid, each cell's anchor exactly covered by its own gt:
        // more than 128 positives available.
        let set = generate_anchors(12, 12, 8, &[8.0], &[1.0]).unwrap();
        let gts: Vec<Box> = set.boxes.clone();
        let asg = assign_anchors(&set, &gts);
        assert_eq!(asg.num_positive(), 144);
        let mut g: Graph<f64> = Graph::new();
        let head = fixed_head(&mut g, 1, 12, 12, vec![0.0; 288], vec![0.0; 576]);
        let loss = detection_loss(&mut g, &head, &asg, 5, 1.0).unwrap();
        assert_eq!(loss.num_pos, MAX_POSITIVES);
        assert_eq!(loss.num_neg, 0); // every anchor is positive
    }
}
