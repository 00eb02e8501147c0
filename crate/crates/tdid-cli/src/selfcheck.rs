//! `tdid selfcheck`: numeric spot checks runnable in the field. Gradient
//! checks plus oracle comparisons, one PASS/FAIL line each; exits nonzero
//! if anything fails.

use tdid_core::check::{self, oracle, E2E_GRAD_TOL, OP_GRAD_TOL};
use tdid_core::{
    assign_anchors, average_precision, generate_anchors, iou, match_detections, nms, Box,
    Detection, Error, Result, SplitMix64,
};

fn int_box(rng: &mut SplitMix64, extent: u64) -> Box {
    let x1 = rng.next_below(extent);
    let y1 = rng.next_below(extent);
    let x2 = x1 + 1 + rng.next_below(extent - x1);
    let y2 = y1 + 1 + rng.next_below(extent - y1);
    Box::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).expect("ordered corners")
}

fn float_box(rng: &mut SplitMix64, extent: f64) -> Box {
    let x1 = rng.range_f64(0.0, extent - 2.0);
    let y1 = rng.range_f64(0.0, extent - 2.0);
    let x2 = x1 + rng.range_f64(1.0, extent - x1);
    let y2 = y1 + rng.range_f64(1.0, extent - y1);
    Box::new(x1, y1, x2, y2).expect("ordered corners")
}

fn op_gradients() -> Result<bool> {
    let cases = check::op_gradient_cases(41)?;
    let worst = cases.iter().cloned().reduce(|a, b| if a.rel_err >= b.rel_err { a } else { b });
    let ok = cases.iter().all(|c| c.passes(OP_GRAD_TOL));
    let worst = worst.expect("at least one case");
    println!(
        "{} op gradients: {} cases, worst {:.2e} ({}) vs {OP_GRAD_TOL:.0e}",
        verdict(ok),
        cases.len(),
        worst.rel_err,
        worst.name
    );
    Ok(ok)
}

fn model_gradient() -> Result<bool> {
    let case = check::model_gradient_case(42)?;
    let ok = case.passes(E2E_GRAD_TOL);
    println!(
        "{} end-to-end loss gradient: worst {:.2e} vs {E2E_GRAD_TOL:.0e}",
        verdict(ok),
        case.rel_err
    );
    Ok(ok)
}

fn iou_oracle() -> bool {
    let mut rng = SplitMix64::new(21);
    let ok = (0..300).all(|_| {
        let a = int_box(&mut rng, 64);
        let b = int_box(&mut rng, 64);
        iou(&a, &b).to_bits() == oracle::pixel_iou(&a, &b).to_bits()
    });
    println!("{} IoU vs pixel-counting oracle (300 pairs)", verdict(ok));
    ok
}

fn nms_oracle() -> bool {
    let mut rng = SplitMix64::new(22);
    let thresholds = [0.3, 0.5, 0.7, 0.9];
    let ok = (0..300).all(|round| {
        let n = 1 + rng.next_below(30) as usize;
        let boxes: Vec<Box> = (0..n).map(|_| float_box(&mut rng, 80.0)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.next_below(10) as f64 / 10.0).collect();
        let thr = thresholds[round % thresholds.len()];
        nms(&boxes, &scores, thr) == oracle::nms(&boxes, &scores, thr)
    });
    println!("{} NMS vs quadratic oracle (300 rounds)", verdict(ok));
    ok
}

fn assignment_oracle() -> bool {
    let mut rng = SplitMix64::new(23);
    let ok = (0..300).all(|_| {
        let hf = 2 + rng.next_below(5) as usize;
        let wf = 2 + rng.next_below(5) as usize;
        let anchors =
            generate_anchors(hf, wf, 8, &[16.0, 32.0], &[0.5, 1.0, 2.0]).expect("valid grid");
        let extent = (wf.min(hf) * 8) as u64;
        let gts: Vec<Box> = (0..rng.next_below(4)).map(|_| int_box(&mut rng, extent)).collect();
        let got = assign_anchors(&anchors, &gts);
        let (labels, matched, targets) = oracle::assign(&anchors, &gts);
        got.labels == labels && got.matched_gt == matched && got.targets == targets
    });
    println!("{} anchor assignment vs rule-literal oracle (300 rounds)", verdict(ok));
    ok
}

fn matching_oracle() -> bool {
    let mut rng = SplitMix64::new(24);
    let ok = (0..300).all(|_| {
        let gts: Vec<Box> = (0..rng.next_below(5)).map(|_| float_box(&mut rng, 80.0)).collect();
        let dets: Vec<Detection> = (0..rng.next_below(8))
            .map(|_| Detection {
                bbox: float_box(&mut rng, 80.0),
                score: rng.next_below(20) as f64 / 20.0,
                target_id: "t".to_string(),
            })
            .collect();
        let got = match_detections(&dets, &gts, 0.5);
        let (tp, fp) = oracle::match_flags(&dets, &gts, 0.5);
        got.tp == tp && got.fp == fp
    });
    println!("{} detection matching vs greedy oracle (300 rounds)", verdict(ok));
    ok
}

fn ap_fixtures() -> bool {
    let first = average_precision(&[(0.9, true), (0.8, false)], 1) == Some(1.0);
    let second = average_precision(&[(0.9, false), (0.8, true)], 1) == Some(0.5);
    let mut rng = SplitMix64::new(26);
    let random = (0..200).all(|_| {
        let n = rng.next_below(20) as usize;
        let scored: Vec<(f64, bool)> =
            (0..n).map(|_| (rng.next_below(8) as f64 / 8.0, rng.next_u64() & 1 == 0)).collect();
        let num_gt = scored.iter().filter(|s| s.1).count() + rng.next_below(3) as usize;
        average_precision(&scored, num_gt) == oracle::average_precision(&scored, num_gt)
    });
    let ok = first && second && random;
    println!("{} average precision fixtures and oracle (200 rounds)", verdict(ok));
    ok
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn run() -> Result<()> {
    let mut all = true;
    all &= op_gradients()?;
    all &= model_gradient()?;
    all &= iou_oracle();
    all &= nms_oracle();
    all &= assignment_oracle();
    all &= matching_oracle();
    all &= ap_fixtures();
    if all {
        println!("selfcheck passed");
        Ok(())
    } else {
        Err(Error::config("selfcheck failed"))
    }
}
