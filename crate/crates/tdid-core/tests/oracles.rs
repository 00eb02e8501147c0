//! Exact equivalence of the geometry and ranking kernels against
//! brute-force reference implementations on randomized inputs: IoU by
//! pixel counting, quadratic NMS, rule-literal anchor assignment, greedy
//! matching, and a from-the-definition AP.

use tdid_core::check::oracle;
use tdid_core::{
    assign_anchors, average_precision, generate_anchors, iou, match_detections, nms, Box,
    Detection, SplitMix64,
};

/// Integer-cornered box inside `[0, extent]²` with sides of at least 1.
fn int_box(rng: &mut SplitMix64, extent: u64) -> Box {
    let x1 = rng.next_below(extent);
    let y1 = rng.next_below(extent);
    let x2 = x1 + 1 + rng.next_below(extent - x1);
    let y2 = y1 + 1 + rng.next_below(extent - y1);
    Box::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).unwrap()
}

fn float_box(rng: &mut SplitMix64, extent: f64) -> Box {
    let x1 = rng.range_f64(0.0, extent - 2.0);
    let y1 = rng.range_f64(0.0, extent - 2.0);
    let x2 = x1 + rng.range_f64(1.0, extent - x1);
    let y2 = y1 + rng.range_f64(1.0, extent - y1);
    Box::new(x1, y1, x2, y2).unwrap()
}

#[test]
fn iou_equals_pixel_counting_on_integer_boxes() {
    let mut rng = SplitMix64::new(21);
    for _ in 0..1000 {
        let a = int_box(&mut rng, 64);
        let b = int_box(&mut rng, 64);
        let fast = iou(&a, &b);
        let counted = oracle::pixel_iou(&a, &b);
        assert_eq!(fast.to_bits(), counted.to_bits(), "a={a:?} b={b:?}");
        assert_eq!(iou(&b, &a).to_bits(), fast.to_bits());
    }
}

#[test]
fn nms_keep_set_equals_quadratic_oracle() {
    let mut rng = SplitMix64::new(22);
    let thresholds = [0.3, 0.5, 0.7, 0.9];
    for round in 0..1000 {
        let n = 1 + rng.next_below(30) as usize;
        let boxes: Vec<Box> = (0..n).map(|_| float_box(&mut rng, 80.0)).collect();
        // Coarse scores force plenty of exact ties.
        let scores: Vec<f64> = (0..n).map(|_| rng.next_below(10) as f64 / 10.0).collect();
        let thr = thresholds[round % thresholds.len()];
        assert_eq!(
            nms(&boxes, &scores, thr),
            oracle::nms(&boxes, &scores, thr),
            "round {round}"
        );
    }
}

#[test]
fn anchor_assignment_equals_rule_literal_oracle() {
    let mut rng = SplitMix64::new(23);
    for round in 0..1000 {
        let hf = 2 + rng.next_below(5) as usize;
        let wf = 2 + rng.next_below(5) as usize;
        let anchors = generate_anchors(hf, wf, 8, &[16.0, 32.0], &[0.5, 1.0, 2.0]).unwrap();
        let extent = (wf.min(hf) * 8) as u64;
        let gts: Vec<Box> =
            (0..rng.next_below(4)).map(|_| int_box(&mut rng, extent)).collect();
        let got = assign_anchors(&anchors, &gts);
        let (labels, matched, targets) = oracle::assign(&anchors, &gts);
        assert_eq!(got.labels, labels, "round {round}, gts {gts:?}");
        assert_eq!(got.matched_gt, matched, "round {round}");
        assert_eq!(got.targets, targets, "round {round}");
    }
}

fn random_detections(rng: &mut SplitMix64, gts: &[Box], extra: usize) -> Vec<Detection> {
    let mut dets = Vec::new();
    for gt in gts {
        // A jittered copy of each ground truth, so matches actually occur.
        let dx = rng.range_f64(-3.0, 3.0);
        let dy = rng.range_f64(-3.0, 3.0);
        let bbox = Box::new(
            (gt.x1 + dx).max(0.0),
            (gt.y1 + dy).max(0.0),
            gt.x2 + dx.abs() + 0.5,
            gt.y2 + dy.abs() + 0.5,
        )
        .unwrap();
        dets.push(Detection {
            bbox,
            score: rng.next_below(20) as f64 / 20.0,
            target_id: "t".to_string(),
        });
    }
    for _ in 0..extra {
        dets.push(Detection {
            bbox: float_box(rng, 80.0),
            score: rng.next_below(20) as f64 / 20.0,
            target_id: "t".to_string(),
        });
    }
    dets
}

#[test]
fn detection_matching_equals_greedy_oracle() {
    let mut rng = SplitMix64::new(24);
    for round in 0..1000 {
        let gts: Vec<Box> =
            (0..rng.next_below(5)).map(|_| float_box(&mut rng, 80.0)).collect();
        let extra = rng.next_below(5) as usize;
        let dets = random_detections(&mut rng, &gts, extra);
        let got = match_detections(&dets, &gts, 0.5);
        let (tp, fp) = oracle::match_flags(&dets, &gts, 0.5);
        assert_eq!(got.tp, tp, "round {round}");
        assert_eq!(got.fp, fp, "round {round}");
    }
}

/// Each detection keeps its TP/FP verdict when the input order changes,
/// including among equal scores (the box-coordinate tie-break pins it).
#[test]
fn matching_is_invariant_to_input_permutation() {
    let mut rng = SplitMix64::new(25);
    for _ in 0..200 {
        let gts: Vec<Box> =
            (0..1 + rng.next_below(4)).map(|_| float_box(&mut rng, 80.0)).collect();
        let dets = random_detections(&mut rng, &gts, 3);
        let base = match_detections(&dets, &gts, 0.5);
        let indices: Vec<usize> = (0..dets.len()).collect();
        let perm = rng.sample(&indices, dets.len());
        let shuffled: Vec<Detection> = perm.iter().map(|&i| dets[i].clone()).collect();
        let moved = match_detections(&shuffled, &gts, 0.5);
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(moved.tp[j], base.tp[i]);
        }
    }
}

#[test]
fn average_precision_equals_definition_oracle() {
    let mut rng = SplitMix64::new(26);
    let mut checked = 0;
    for _ in 0..150 {
        let n = rng.next_below(20) as usize;
        let scored: Vec<(f64, bool)> = (0..n)
            .map(|_| (rng.next_below(8) as f64 / 8.0, rng.next_u64() & 1 == 0))
            .collect();
        let tp_count = scored.iter().filter(|s| s.1).count();
        let num_gt = tp_count + rng.next_below(3) as usize;
        let got = average_precision(&scored, num_gt);
        let want = oracle::average_precision(&scored, num_gt);
        assert_eq!(got, want, "scored {scored:?} num_gt {num_gt}");
        if num_gt > 0 {
            let ap = got.unwrap();
            assert!((0.0..=1.0).contains(&ap));
            checked += 1;
        }
    }
    assert!(checked >= 100, "only {checked} non-degenerate sequences");
}
