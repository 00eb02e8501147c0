//! Detection-quality measurement: greedy matching at IoU 0.5, all-point
//! interpolated average precision per instance, size-bucketed variants,
//! and a one-shot classification mode that reuses the detection head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, Box};
use crate::data::pad_to_stride;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::postprocess::{detect_all, foreground_score, Detection, TargetFeatureCache};
use crate::tensor::Tensor;

/// Matching criterion: a detection counts as a hit only at IoU 0.5 or
/// better.
pub const EVAL_IOU: f64 = 0.5;

/// Outcome of matching one scene's detections against its ground truth.
/// All three vectors are indexed like the input detections; `tp` and `fp`
/// are complements.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutcome {
    pub tp: Vec<bool>,
    pub fp: Vec<bool>,
    /// Ground-truth index each true positive consumed.
    pub matched_gt: Vec<Option<usize>>,
}

fn corner_key(b: &Box) -> [f64; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

/// Greedily match detections to ground truth. Detections claim GTs in
/// score order (ties broken by box coordinates lexicographically, then by
/// input position); each detection takes the unmatched GT of highest IoU
/// when that IoU reaches `iou_thresh`, and every GT is claimed at most
/// once. Equal-IoU candidates resolve to the lowest GT index.
pub fn match_detections(dets: &[Detection], gts: &[Box], iou_thresh: f64) -> MatchOutcome {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                corner_key(&dets[a].bbox)
                    .partial_cmp(&corner_key(&dets[b].bbox))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut matched_gt = vec![None; dets.len()];
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let overlap = iou(&dets[di].bbox, gt);
            if overlap >= iou_thresh && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            matched_gt[di] = Some(gi);
        }
    }
    let tp: Vec<bool> = matched_gt.iter().map(Option::is_some).collect();
    let fp = tp.iter().map(|&t| !t).collect();
    MatchOutcome { tp, fp, matched_gt }
}

/// All-point interpolated average precision over `(score, is_tp)` pairs
/// pooled across scenes. Pairs are ranked by descending score (equal
/// scores keep their input order); AP is the area under the interpolated
/// precision/recall curve, where interpolated precision at recall r is the
/// maximum precision at any recall ≥ r.
///
/// Returns `None` when `num_gt` is zero: the instance has nothing to
/// recall and is excluded from mean AP rather than scored.
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b].0
            .partial_cmp(&scored[a].0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        if scored[i].1 {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let mut interpolated = precision.clone();
    for i in (1..interpolated.len()).rev() {
        if interpolated[i] > interpolated[i - 1] {
            interpolated[i - 1] = interpolated[i];
        }
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (i, &r) in recall.iter().enumerate() {
        if r > prev {
            ap += (r - prev) * interpolated[i];
            prev = r;
        }
    }
    Some(ap)
}

/// A named ground-truth size class: boxes whose area lands in
/// `[min_area, max_area)` belong to the bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBucket {
    pub name: String,
    pub min_area: f64,
    /// Exclusive upper bound; `None` means unbounded.
    pub max_area: Option<f64>,
}

impl SizeBucket {
    pub fn at_least(name: &str, min_area: f64) -> SizeBucket {
        SizeBucket { name: name.to_string(), min_area, max_area: None }
    }

    pub fn range(name: &str, min_area: f64, max_area: f64) -> SizeBucket {
        SizeBucket { name: name.to_string(), min_area, max_area: Some(max_area) }
    }

    pub fn contains(&self, b: &Box) -> bool {
        let a = b.area();
        a >= self.min_area && self.max_area.is_none_or(|m| a < m)
    }

    /// The two always-reported rows: "all" keeps boxes of at least
    /// 50x30 px², "large" those of at least 100x50.
    pub fn canonical() -> Vec<SizeBucket> {
        vec![SizeBucket::at_least("all", 1500.0), SizeBucket::at_least("large", 5000.0)]
    }
}

/// TP/FP/FN totals across every instance, plus how many instances carried
/// ground truth (and so contributed an AP) versus were excluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub missed: u64,
    pub evaluated_instances: u64,
    pub excluded_instances: u64,
}

/// Final evaluation report. `map` is the unweighted mean of per-instance
/// APs over instances with at least one ground-truth box (0 when none
/// has any); bucket means are computed the same way over each bucket's
/// surviving ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub per_instance: BTreeMap<String, f64>,
    pub buckets: BTreeMap<String, f64>,
    pub counts: Counts,
}

struct InstanceAgg {
    num_gt: usize,
    scored: Vec<(f64, bool)>,
    bucket_num_gt: Vec<usize>,
    bucket_scored: Vec<Vec<(f64, bool)>>,
}

impl InstanceAgg {
    fn new(num_buckets: usize) -> InstanceAgg {
        InstanceAgg {
            num_gt: 0,
            scored: Vec::new(),
            bucket_num_gt: vec![0; num_buckets],
            bucket_scored: vec![Vec::new(); num_buckets],
        }
    }
}

/// Order-independent AP bookkeeping. Feed each (instance, scene) pair
/// once via [`Accumulator::record`]; scores are pooled per instance and
/// only ranked at [`Accumulator::finish`], so any scene order yields the
/// same result as long as equal scores arrive in a fixed order.
pub struct Accumulator {
    iou_thresh: f64,
    buckets: Vec<SizeBucket>,
    per_instance: BTreeMap<String, InstanceAgg>,
}

impl Accumulator {
    pub fn new(buckets: Vec<SizeBucket>, iou_thresh: f64) -> Accumulator {
        Accumulator { iou_thresh, buckets, per_instance: BTreeMap::new() }
    }

    /// Register an instance id so it is reported (as excluded) even if no
    /// scene ever carries its ground truth.
    pub fn ensure_instance(&mut self, id: &str) {
        let n = self.buckets.len();
        self.per_instance.entry(id.to_string()).or_insert_with(|| InstanceAgg::new(n));
    }

    /// Fold in one scene's detections and ground-truth boxes for one
    /// instance. Bucket tallies reuse the full matching: a detection
    /// matched to a GT outside the bucket is ignored there (neither TP
    /// nor FP), unmatched detections stay false positives everywhere.
    pub fn record(&mut self, id: &str, dets: &[Detection], gts: &[Box]) {
        let num_buckets = self.buckets.len();
        let outcome = match_detections(dets, gts, self.iou_thresh);
        let agg = self
            .per_instance
            .entry(id.to_string())
            .or_insert_with(|| InstanceAgg::new(num_buckets));
        agg.num_gt += gts.len();
        for (bi, bucket) in self.buckets.iter().enumerate() {
            agg.bucket_num_gt[bi] += gts.iter().filter(|g| bucket.contains(g)).count();
        }
        for (det, matched) in dets.iter().zip(&outcome.matched_gt) {
            agg.scored.push((det.score, matched.is_some()));
            for (bi, bucket) in self.buckets.iter().enumerate() {
                match matched {
                    Some(gi) if bucket.contains(&gts[*gi]) => {
                        agg.bucket_scored[bi].push((det.score, true));
                    }
                    Some(_) => {}
                    None => agg.bucket_scored[bi].push((det.score, false)),
                }
            }
        }
    }

    pub fn finish(self) -> EvalResult {
        let mut per_instance = BTreeMap::new();
        let mut counts =
            Counts { tp: 0, fp: 0, missed: 0, evaluated_instances: 0, excluded_instances: 0 };
        let mut map_sum = 0.0;
        let mut bucket_sums = vec![(0.0, 0u64); self.buckets.len()];
        for (id, agg) in &self.per_instance {
            let tp = agg.scored.iter().filter(|s| s.1).count();
            counts.tp += tp as u64;
            counts.fp += (agg.scored.len() - tp) as u64;
            counts.missed += (agg.num_gt - tp) as u64;
            match average_precision(&agg.scored, agg.num_gt) {
                Some(ap) => {
                    per_instance.insert(id.clone(), ap);
                    map_sum += ap;
                    counts.evaluated_instances += 1;
                }
                None => counts.excluded_instances += 1,
            }
            for (bi, sums) in bucket_sums.iter_mut().enumerate() {
                if let Some(ap) =
                    average_precision(&agg.bucket_scored[bi], agg.bucket_num_gt[bi])
                {
                    sums.0 += ap;
                    sums.1 += 1;
                }
            }
        }
        let map = if counts.evaluated_instances > 0 {
            map_sum / counts.evaluated_instances as f64
        } else {
            0.0
        };
        let buckets = self
            .buckets
            .iter()
            .zip(&bucket_sums)
            .map(|(b, &(sum, n))| (b.name.clone(), if n > 0 { sum / n as f64 } else { 0.0 }))
            .collect();
        EvalResult { map, per_instance, buckets, counts }
    }
}

/// One scene ready for evaluation: the image and its ground-truth boxes
/// keyed by instance id (absent id means the instance is not in frame).
pub struct EvalScene {
    pub image: Tensor<f32>,
    pub gts: BTreeMap<String, Vec<Box>>,
}

/// Evaluate every (instance, scene) pair: each scene runs through
/// [`detect_all`] (one backbone pass for all instances), detections pool
/// per instance, and APs aggregate into an [`EvalResult`].
///
/// `load` fetches a scene by index and may be called from `threads`
/// worker threads; per-scene outputs are folded in scene order afterward,
/// so the result is bitwise identical for any thread count.
pub fn evaluate_scenes<F>(
    model: &Model<f32>,
    cache: &TargetFeatureCache,
    ids: &[String],
    num_scenes: usize,
    load: F,
    buckets: &[SizeBucket],
    score_threshold: f64,
    threads: usize,
) -> Result<EvalResult>
where
    F: Fn(usize) -> Result<EvalScene> + Sync,
{
    type SceneOut = (BTreeMap<String, Vec<Detection>>, BTreeMap<String, Vec<Box>>);
    let run_one = |i: usize| -> Result<SceneOut> {
        let scene = load(i)?;
        let dets = detect_all(model, &scene.image, ids, cache, score_threshold)?;
        Ok((dets, scene.gts))
    };

    let threads = threads.max(1).min(num_scenes.max(1));
    let mut results: Vec<Option<Result<SceneOut>>> = (0..num_scenes).map(|_| None).collect();
    if threads <= 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_one(i));
        }
    } else {
        let chunk = num_scenes.div_ceil(threads);
        std::thread::scope(|scope| {
            for (w, slots) in results.chunks_mut(chunk).enumerate() {
                let run_one = &run_one;
                scope.spawn(move || {
                    for (off, slot) in slots.iter_mut().enumerate() {
                        *slot = Some(run_one(w * chunk + off));
                    }
                });
            }
        });
    }

    let mut acc = Accumulator::new(buckets.to_vec(), EVAL_IOU);
    for id in ids {
        acc.ensure_instance(id);
    }
    let empty: Vec<Box> = Vec::new();
    for slot in results {
        let (dets, gts) = slot.expect("every scene slot is filled")?;
        for id in ids {
            let scene_gts = gts.get(id).unwrap_or(&empty);
            acc.record(id, &dets[id], scene_gts);
        }
    }
    Ok(acc.finish())
}

/// One-shot classification by detection scoring: for each candidate the
/// crop is scored as the maximum foreground probability over all anchors,
/// and the highest-scoring candidate wins (ties go to the
/// lexicographically smallest id). The crop runs through the backbone
/// once regardless of candidate count.
pub fn classify(
    model: &Model<f32>,
    crop: &Tensor<f32>,
    candidate_ids: &[String],
    cache: &TargetFeatureCache,
) -> Result<(String, BTreeMap<String, f64>)> {
    if candidate_ids.is_empty() {
        return Err(Error::config("classification needs at least one candidate id"));
    }
    let padded = pad_to_stride(crop, model.config().backbone_stride)?;
    let mut session = model.session(false);
    let crop_feat = session.extract_features(&padded)?;
    let mut score_map = BTreeMap::new();
    for id in candidate_ids {
        let views = cache.views(id)?;
        let target_vars: Vec<_> = views
            .raw
            .iter()
            .map(|t| session.graph.constant(t.clone()))
            .collect();
        let embedded = session.embed(crop_feat, &target_vars)?;
        let head = session.head(embedded)?;
        let cls = session.graph.value(head.cls_logits);
        let (_, _, hf, wf) = cls.dims4()?;
        let plane = hf * wf;
        let mut best = f64::NEG_INFINITY;
        for slot in 0..head.anchors_per_cell {
            let bg = &cls.data()[2 * slot * plane..(2 * slot + 1) * plane];
            let fg = &cls.data()[(2 * slot + 1) * plane..(2 * slot + 2) * plane];
            for (&b, &f) in bg.iter().zip(fg) {
                let s = foreground_score(b, f);
                if s > best {
                    best = s;
                }
            }
        }
        if !best.is_finite() {
            return Err(Error::config(format!("non-finite classification score for `{id}`")));
        }
        score_map.insert(id.clone(), best);
    }
    let mut winner: Option<(&String, f64)> = None;
    for (id, &score) in &score_map {
        if winner.is_none_or(|(_, w)| score > w) {
            winner = Some((id, score));
        }
    }
    let (id, _) = winner.expect("candidate set is non-empty");
    Ok((id.clone(), score_map))
}
