//! From raw head outputs to ranked detections: foreground scoring, box
//! decoding, greedy NMS, and the precomputed target-feature cache that
//! lets a single scene pass answer queries for many targets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::generate_anchors;
use crate::boxes::{decode_box, iou, Box};
use crate::checkpoint;
use crate::config::ModelConfig;
use crate::data::pad_to_stride;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{HeadOutput, Model};
use crate::tensor::Tensor;

/// Pre-NMS score cutoff used when no explicit threshold is given. Bounds
/// the number of boxes entering suppression; raising it only ever removes
/// detections.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.05;
/// Overlap at or above which a lower-scored box is suppressed.
pub const NMS_IOU: f64 = 0.7;
/// At most this many detections are reported per scene/target pair.
pub const MAX_DETECTIONS: usize = 5;

/// One scored box for one queried target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Decoded box, clipped to the original (pre-padding) image extent.
    #[serde(rename = "box")]
    pub bbox: Box,
    /// Foreground softmax probability of the anchor that produced the box.
    pub score: f64,
    /// Which cached target this detection answers.
    pub target_id: String,
}

/// Greedy non-maximum suppression over parallel `boxes`/`scores` slices.
///
/// Returns the kept indices in selection order: score descending, equal
/// scores resolved toward the lower input index. A candidate survives only
/// if its IoU with every previously kept box is strictly below
/// `iou_thresh`; an overlap equal to the threshold suppresses.
pub fn nms(boxes: &[Box], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "each box needs a score");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) < iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Backbone features for every view of one target.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetViews {
    /// Full feature map `[1, N, th, tw]` per view.
    pub raw: Vec<Tensor<f32>>,
    /// Per-channel global max `[1, N, 1, 1]` of the matching raw map.
    pub pooled: Vec<Tensor<f32>>,
}

/// Precomputed target features keyed by instance id.
///
/// Detection only re-runs the scene backbone; target features are bound
/// from here as graph constants, bit-identical to freshly extracted ones.
/// The pooled vectors are stored alongside the raw maps so consumers that
/// need only the reduction can skip the full map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TargetFeatureCache {
    entries: BTreeMap<String, TargetViews>,
}

impl TargetFeatureCache {
    /// Cached instance ids in sorted order.
    pub fn ids(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    /// Look up one target's features.
    pub fn views(&self, id: &str) -> Result<&TargetViews> {
        self.entries
            .get(id)
            .ok_or_else(|| Error::MissingTarget(id.to_string()))
    }

    /// Serialize into the checkpoint container. Entries are named
    /// `tcache/<id>/<view>/{raw,pooled}` and emitted in sorted id order,
    /// so rebuilding the same cache writes byte-identical files.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut named: Vec<(String, &Tensor<f32>)> = Vec::new();
        for (id, views) in &self.entries {
            for (v, (raw, pooled)) in views.raw.iter().zip(&views.pooled).enumerate() {
                named.push((format!("tcache/{id}/{v}/raw"), raw));
                named.push((format!("tcache/{id}/{v}/pooled"), pooled));
            }
        }
        checkpoint::write(path, named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Read a cache written by [`TargetFeatureCache::save`], validating
    /// that every id carries a contiguous run of views each with both a
    /// raw map and a pooled vector.
    pub fn load(path: &Path) -> Result<TargetFeatureCache> {
        type Slot = (Option<Tensor<f32>>, Option<Tensor<f32>>);
        let mut staged: BTreeMap<String, BTreeMap<usize, Slot>> = BTreeMap::new();
        for (name, tensor) in checkpoint::read(path)? {
            let bad = || Error::config(format!("unrecognized cache entry `{name}`"));
            let rest = name.strip_prefix("tcache/").ok_or_else(bad)?;
            let mut parts = rest.rsplitn(3, '/');
            let kind = parts.next().ok_or_else(bad)?;
            let view: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let id = parts.next().ok_or_else(bad)?;
            if id.is_empty() {
                return Err(bad());
            }
            let slot = staged.entry(id.to_string()).or_default().entry(view).or_default();
            let cell = match kind {
                "raw" => &mut slot.0,
                "pooled" => &mut slot.1,
                _ => return Err(bad()),
            };
            if cell.replace(tensor).is_some() {
                return Err(Error::config(format!("duplicate cache entry `{name}`")));
            }
        }
        let mut entries = BTreeMap::new();
        for (id, views) in staged {
            let count = views.len();
            let mut raw = Vec::with_capacity(count);
            let mut pooled = Vec::with_capacity(count);
            for v in 0..count {
                let (r, p) = views.get(&v).cloned().ok_or_else(|| {
                    Error::config(format!("cache for `{id}` is missing view {v}"))
                })?;
                let complete = |o: Option<Tensor<f32>>, kind: &str| {
                    o.ok_or_else(|| {
                        Error::config(format!("cache for `{id}` view {v} lacks a {kind} entry"))
                    })
                };
                raw.push(complete(r, "raw")?);
                pooled.push(complete(p, "pooled")?);
            }
            entries.insert(id, TargetViews { raw, pooled });
        }
        Ok(TargetFeatureCache { entries })
    }
}

/// Run the backbone over every view of every target and store the
/// resulting feature maps plus their global-max reductions. Each id must
/// supply exactly the number of views the model was configured for.
pub fn build_cache(
    model: &Model<f32>,
    targets: &BTreeMap<String, Vec<Tensor<f32>>>,
) -> Result<TargetFeatureCache> {
    let t = model.config().num_target_views;
    let stride = model.config().backbone_stride;
    let mut entries = BTreeMap::new();
    for (id, images) in targets {
        if id.is_empty() || id.contains('/') {
            return Err(Error::config(format!(
                "target id `{id}` must be non-empty and free of `/`"
            )));
        }
        if images.len() != t {
            return Err(Error::config(format!(
                "target `{id}` has {} views, model expects {t}",
                images.len()
            )));
        }
        let mut raw = Vec::with_capacity(t);
        let mut pooled = Vec::with_capacity(t);
        for image in images {
            let mut session = model.session(false);
            let feat = session.extract_features(&pad_to_stride(image, stride)?)?;
            let reduced = session.graph.global_max_pool(feat)?;
            raw.push(session.graph.value(feat).clone());
            pooled.push(session.graph.value(reduced).clone());
        }
        entries.insert(id.clone(), TargetViews { raw, pooled });
    }
    Ok(TargetFeatureCache { entries })
}

/// Foreground probability from the two class logits: the softmax of
/// (background, foreground) evaluated stably via the logit margin.
pub(crate) fn foreground_score(bg: f32, fg: f32) -> f64 {
    let margin = f64::from(fg) - f64::from(bg);
    if margin >= 0.0 {
        1.0 / (1.0 + (-margin).exp())
    } else {
        let e = margin.exp();
        e / (1.0 + e)
    }
}

/// Score and decode every anchor of one head output, then filter, NMS,
/// and truncate. `extent` is the original image width/height; decoded
/// boxes never extend into padding.
fn rank_detections(
    graph: &Graph<f32>,
    head: &HeadOutput,
    config: &ModelConfig,
    extent: (f64, f64),
    target_id: &str,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let anchors = generate_anchors(
        head.hf,
        head.wf,
        head.feature_stride,
        &config.anchor_scales,
        &config.anchor_ratios,
    )?;
    let cls = graph.value(head.cls_logits);
    let reg = graph.value(head.reg_deltas);
    let (hf, wf, per_cell) = (head.hf, head.wf, head.anchors_per_cell);
    let cell = |c: usize, i: usize, j: usize| (c * hf + i) * wf + j;

    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for i in 0..hf {
        for j in 0..wf {
            for slot in 0..per_cell {
                let bg = cls.data()[cell(2 * slot, i, j)];
                let fg = cls.data()[cell(2 * slot + 1, i, j)];
                let score = foreground_score(bg, fg);
                if !score.is_finite() {
                    return Err(Error::config(format!(
                        "non-finite class logits at cell ({i},{j}) slot {slot}"
                    )));
                }
                let deltas =
                    std::array::from_fn(|d| f64::from(reg.data()[cell(4 * slot + d, i, j)]));
                let anchor = &anchors.boxes[(i * wf + j) * per_cell + slot];
                if score < score_threshold {
                    continue;
                }
                if let Some(decoded) = decode_box(anchor, deltas, extent)? {
                    boxes.push(decoded);
                    scores.push(score);
                }
            }
        }
    }

    let keep = nms(&boxes, &scores, NMS_IOU);
    Ok(keep
        .into_iter()
        .take(MAX_DETECTIONS)
        .map(|k| Detection {
            bbox: boxes[k],
            score: scores[k],
            target_id: target_id.to_string(),
        })
        .collect())
}

/// Detect one cached target in a scene.
///
/// The scene is zero-padded to a stride-divisible extent, run through the
/// backbone, conditioned on the cached target features, and the head
/// output is scored, decoded, thresholded, suppressed at [`NMS_IOU`], and
/// truncated to [`MAX_DETECTIONS`] results sorted by descending score.
pub fn detect(
    model: &Model<f32>,
    scene: &Tensor<f32>,
    target_id: &str,
    cache: &TargetFeatureCache,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let views = cache.views(target_id)?;
    let (_, _, h, w) = scene.dims4()?;
    let padded = pad_to_stride(scene, model.config().backbone_stride)?;
    let mut session = model.session(false);
    let scene_feat = session.extract_features(&padded)?;
    let target_vars: Vec<_> = views
        .raw
        .iter()
        .map(|t| session.graph.constant(t.clone()))
        .collect();
    let embedded = session.embed(scene_feat, &target_vars)?;
    let head = session.head(embedded)?;
    rank_detections(
        &session.graph,
        &head,
        model.config(),
        (w as f64, h as f64),
        target_id,
        score_threshold,
    )
}

/// Detect every listed target in one scene while running the scene
/// backbone exactly once; only the embedding and head repeat per target.
/// Results are bitwise identical to calling [`detect`] per id.
pub fn detect_all(
    model: &Model<f32>,
    scene: &Tensor<f32>,
    target_ids: &[String],
    cache: &TargetFeatureCache,
    score_threshold: f64,
) -> Result<BTreeMap<String, Vec<Detection>>> {
    let (_, _, h, w) = scene.dims4()?;
    let padded = pad_to_stride(scene, model.config().backbone_stride)?;
    let mut session = model.session(false);
    let scene_feat = session.extract_features(&padded)?;
    let mut out = BTreeMap::new();
    for id in target_ids {
        let views = cache.views(id)?;
        let target_vars: Vec<_> = views
            .raw
            .iter()
            .map(|t| session.graph.constant(t.clone()))
            .collect();
        let embedded = session.embed(scene_feat, &target_vars)?;
        let head = session.head(embedded)?;
        let dets = rank_detections(
            &session.graph,
            &head,
            model.config(),
            (w as f64, h as f64),
            id,
            score_threshold,
        )?;
        out.insert(id.clone(), dets);
    }
    Ok(out)
}
