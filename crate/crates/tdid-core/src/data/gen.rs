//! Synthetic dataset generation.
//!
//! A dataset is a directory tree — scene images, target view images, and
//! a manifest — produced deterministically from one seed. Each scene gets
//! its own RNG substream keyed by scene index, so scenes are independent
//! of each other and of how many scenes surround them.
//!
//! Composition rules per scene:
//! - background: bilinearly interpolated value-noise plus a few solid
//!   rectangles, all muted (value ≤ 0.6) so no background pixel can be
//!   mistaken for a glyph tone (value 0.9);
//! - 30% of scenes are empty, the rest hold 1–3 distinct instances at
//!   uniform random scales, placed so their boxes never overlap;
//! - an instance may be occluded by a muted strip covering one of its
//!   edges; the strip stays inside the box, so the recorded occlusion is
//!   the exact covered-pixel fraction;
//! - extra muted clutter rectangles are drawn away from instance boxes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::glyph::{
    glyph_tones_u8, hsv_to_rgb, instance_roster, paint_glyph, render_target_view, InstanceSpec,
    MUTED_VALUE_MAX,
};
use crate::data::manifest::{
    validate_manifest, Annotation, DatasetManifest, SceneRecord, Splits, FORMAT_VERSION,
    MAX_LEGAL_OCCLUSION,
};
use crate::data::ppm::save_ppm;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Edge length of target view images.
pub const TARGET_EXTENT: usize = 64;

/// Fraction of scenes with no instances at all.
const EMPTY_SCENE_RATE: f64 = 0.3;

/// Chance that a placed instance gets an occluder (when occlusion is on).
const OCCLUDER_RATE: f64 = 0.5;

/// Placement attempts before giving up on an instance or distractor.
const PLACEMENT_TRIES: usize = 50;

const SCENE_STREAM: u64 = 0x7363_656e_0000_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// How many distinct instances to invent (at least 2).
    pub num_instances: usize,
    pub num_scenes: usize,
    /// Scene edge length in pixels (scenes are square).
    pub image_size: usize,
    /// Unscaled glyph edge length in pixels.
    pub canonical_size: usize,
    /// Uniform scale factor range applied to `canonical_size`.
    pub scale_range: (f64, f64),
    /// Maximum occlusion fraction; 0 disables occluders.
    pub max_occlusion: f64,
    /// Maximum clutter rectangles per scene.
    pub distractors: usize,
    /// Leading fraction of scene indices assigned to the train split.
    pub train_fraction: f64,
    pub seed: u64,
    /// Instance ids to keep out of training scenes (their targets are
    /// still rendered so they can be evaluated zero-shot).
    pub holdout_ids: Vec<String>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_instances: 8,
            num_scenes: 200,
            image_size: 128,
            canonical_size: 48,
            scale_range: (0.6, 1.4),
            max_occlusion: 0.4,
            distractors: 3,
            train_fraction: 0.7,
            seed: 0,
            holdout_ids: Vec::new(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_instances < 2 {
            return Err(Error::config("need at least 2 instances"));
        }
        if self.num_scenes == 0 || self.num_scenes > 9999 {
            return Err(Error::config("num_scenes must be in 1..=9999"));
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size must be at least 16"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::config(format!("bad scale_range ({lo}, {hi})")));
        }
        if self.canonical_size < 8 || self.canonical_size > TARGET_EXTENT {
            return Err(Error::config(format!(
                "canonical_size must be in 8..={TARGET_EXTENT}"
            )));
        }
        let max_px = (hi * self.canonical_size as f64).round() as usize;
        if max_px > self.image_size {
            return Err(Error::config(format!(
                "largest instance ({max_px} px) would not fit a {} px scene",
                self.image_size
            )));
        }
        if !(0.0..MAX_LEGAL_OCCLUSION).contains(&self.max_occlusion) {
            return Err(Error::config(format!(
                "max_occlusion must be in [0, {MAX_LEGAL_OCCLUSION})"
            )));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::config("train_fraction must be in [0, 1]"));
        }
        let ids: Vec<String> = instance_roster(self.num_instances, self.canonical_size)
            .into_iter()
            .map(|s| s.id)
            .collect();
        for id in &self.holdout_ids {
            if !ids.contains(id) {
                return Err(Error::config(format!("holdout id `{id}` is not generated")));
            }
        }
        if self.holdout_ids.len() >= self.num_instances {
            return Err(Error::config("cannot hold out every instance"));
        }
        Ok(())
    }

    fn train_scene_count(&self) -> usize {
        ((self.train_fraction * self.num_scenes as f64).round() as usize).min(self.num_scenes)
    }
}

/// Integer rectangle in half-open pixel coordinates.
#[derive(Clone, Copy, Debug)]
struct Rect {
    x1: usize,
    y1: usize,
    x2: usize,
    y2: usize,
}

impl Rect {
    fn overlaps(&self, other: &Rect) -> bool {
        self.x1 < other.x2 && other.x1 < self.x2 && self.y1 < other.y2 && other.y1 < self.y2
    }
}

fn fill_rect(image: &mut Tensor<f32>, rect: Rect, color: [f32; 3]) {
    let (_, _, h, w) = image.dims4().expect("scene image is [1, 3, H, W]");
    let plane = h * w;
    let data = image.data_mut();
    for (ch, &value) in color.iter().enumerate() {
        for r in rect.y1..rect.y2 {
            let row = ch * plane + r * w;
            data[row + rect.x1..row + rect.x2].fill(value);
        }
    }
}

fn muted_color(rng: &mut SplitMix64) -> [f32; 3] {
    let rgb = hsv_to_rgb(
        rng.next_f64(),
        rng.range_f64(0.05, 0.5),
        rng.range_f64(0.2, MUTED_VALUE_MAX),
    );
    [rgb[0] as f32, rgb[1] as f32, rgb[2] as f32]
}

/// Muted value-noise: a coarse lattice of random colors, bilinearly
/// interpolated. Interpolation is convex, so the muted value bound holds
/// at every pixel.
fn paint_background(image: &mut Tensor<f32>, rng: &mut SplitMix64, size: usize) {
    const CELLS: usize = 4;
    let nodes = CELLS + 1;
    let mut lattice = vec![[0.0f32; 3]; nodes * nodes];
    for node in lattice.iter_mut() {
        *node = muted_color(rng);
    }
    let plane = size * size;
    let data = image.data_mut();
    let step = size as f64 / CELLS as f64;
    for r in 0..size {
        let fy = r as f64 / step;
        let iy = (fy.floor() as usize).min(CELLS - 1);
        let ty = (fy - iy as f64) as f32;
        for c in 0..size {
            let fx = c as f64 / step;
            let ix = (fx.floor() as usize).min(CELLS - 1);
            let tx = (fx - ix as f64) as f32;
            for ch in 0..3 {
                let c00 = lattice[iy * nodes + ix][ch];
                let c01 = lattice[iy * nodes + ix + 1][ch];
                let c10 = lattice[(iy + 1) * nodes + ix][ch];
                let c11 = lattice[(iy + 1) * nodes + ix + 1][ch];
                let top = c00 + (c01 - c00) * tx;
                let bot = c10 + (c11 - c10) * tx;
                data[ch * plane + r * size + c] = top + (bot - top) * ty;
            }
        }
    }
    // A few soft rectangles break up the gradient field.
    let rects = 3 + rng.next_below(5) as usize;
    for _ in 0..rects {
        let w = 6 + rng.next_below((size / 2) as u64) as usize;
        let h = 6 + rng.next_below((size / 2) as u64) as usize;
        let x1 = rng.next_below((size - w + 1) as u64) as usize;
        let y1 = rng.next_below((size - h + 1) as u64) as usize;
        let color = muted_color(rng);
        fill_rect(image, Rect { x1, y1, x2: x1 + w, y2: y1 + h }, color);
    }
}

struct PlannedInstance {
    roster_index: usize,
    rect: Rect,
    /// Occluder strip (inside `rect`), its exact covered fraction, and
    /// its fill color.
    occluder: Option<(Rect, f64, [f32; 3])>,
}

/// Decide everything random about one scene, in a fixed draw order:
/// background, presence, instance ids, per-instance scale/placement,
/// occluders, clutter. The paint pass below consumes no randomness.
fn plan_scene(
    rng: &mut SplitMix64,
    config: &GenConfig,
    allowed: &[usize],
) -> (Vec<PlannedInstance>, Vec<(Rect, [f32; 3])>) {
    let size = config.image_size;
    let mut placed: Vec<PlannedInstance> = Vec::new();
    if rng.next_f64() >= EMPTY_SCENE_RATE {
        let want = (1 + rng.next_below(3) as usize).min(allowed.len());
        for roster_index in rng.sample(allowed, want) {
            let scale = rng.range_f64(config.scale_range.0, config.scale_range.1);
            let px = ((scale * config.canonical_size as f64).round() as usize).clamp(8, size);
            let mut found = None;
            for _ in 0..PLACEMENT_TRIES {
                let x1 = rng.next_below((size - px + 1) as u64) as usize;
                let y1 = rng.next_below((size - px + 1) as u64) as usize;
                let rect = Rect { x1, y1, x2: x1 + px, y2: y1 + px };
                if placed.iter().all(|p| !p.rect.overlaps(&rect)) {
                    found = Some(rect);
                    break;
                }
            }
            if let Some(rect) = found {
                placed.push(PlannedInstance { roster_index, rect, occluder: None });
            }
        }
    }
    for inst in &mut placed {
        if config.max_occlusion > 0.0 && rng.next_f64() < OCCLUDER_RATE {
            let side = rng.next_below(4);
            let frac = rng.range_f64(0.2, 1.0) * config.max_occlusion;
            let px = inst.rect.x2 - inst.rect.x1;
            let cap = (config.max_occlusion * px as f64).floor() as usize;
            let span = ((frac * px as f64).round() as usize).min(cap).min(px - 1);
            let color = muted_color(rng);
            if span > 0 {
                let r = inst.rect;
                let strip = match side {
                    0 => Rect { x2: r.x1 + span, ..r },
                    1 => Rect { x1: r.x2 - span, ..r },
                    2 => Rect { y2: r.y1 + span, ..r },
                    _ => Rect { y1: r.y2 - span, ..r },
                };
                inst.occluder = Some((strip, span as f64 / px as f64, color));
            }
        }
    }
    let mut clutter = Vec::new();
    if config.distractors > 0 {
        let budget = rng.next_below(config.distractors as u64 + 1) as usize;
        for _ in 0..budget {
            let w = (8 + rng.next_below(24) as usize).min(size);
            let h = (8 + rng.next_below(24) as usize).min(size);
            let color = muted_color(rng);
            let mut found = None;
            for _ in 0..PLACEMENT_TRIES {
                let x1 = rng.next_below((size - w + 1) as u64) as usize;
                let y1 = rng.next_below((size - h + 1) as u64) as usize;
                let rect = Rect { x1, y1, x2: x1 + w, y2: y1 + h };
                if placed.iter().all(|p| !p.rect.overlaps(&rect)) {
                    found = Some(rect);
                    break;
                }
            }
            if let Some(rect) = found {
                clutter.push((rect, color));
            }
        }
    }
    (placed, clutter)
}

/// Compose one scene image plus its annotations and clutter count.
fn render_scene(
    config: &GenConfig,
    roster: &[InstanceSpec],
    allowed: &[usize],
    scene_index: usize,
) -> (Tensor<f32>, Vec<Annotation>, usize) {
    let size = config.image_size;
    let mut rng = SplitMix64::substream(config.seed, SCENE_STREAM ^ scene_index as u64);
    let mut image = Tensor::zeros(vec![1, 3, size, size]);
    paint_background(&mut image, &mut rng, size);
    let (placed, clutter) = plan_scene(&mut rng, config, allowed);
    for &(rect, color) in &clutter {
        fill_rect(&mut image, rect, color);
    }
    let mut occluders = 0;
    let mut annotations = Vec::new();
    for inst in &placed {
        let spec = &roster[inst.roster_index];
        let px = inst.rect.x2 - inst.rect.x1;
        paint_glyph(&mut image, &spec.glyph, inst.rect.x1, inst.rect.y1, px);
        let occlusion = match inst.occluder {
            Some((strip, frac, color)) => {
                fill_rect(&mut image, strip, color);
                occluders += 1;
                frac
            }
            None => 0.0,
        };
        annotations.push(Annotation {
            id: spec.id.clone(),
            bbox: [
                inst.rect.x1 as f64,
                inst.rect.y1 as f64,
                inst.rect.x2 as f64,
                inst.rect.y2 as f64,
            ],
            occlusion,
        });
    }
    (image, annotations, clutter.len() + occluders)
}

/// Generate the full dataset tree under `out_dir` and return its
/// manifest (also written to `out_dir/manifest.json`). Deterministic:
/// the same config writes byte-identical files every time.
pub fn generate_dataset(config: &GenConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let roster = instance_roster(config.num_instances, config.canonical_size);
    std::fs::create_dir_all(out_dir.join("scenes"))?;

    let mut targets = BTreeMap::new();
    for spec in &roster {
        let dir = out_dir.join("targets").join(&spec.id);
        std::fs::create_dir_all(&dir)?;
        let mut views = Vec::new();
        for view in 0..2 {
            let rel = format!("targets/{}/view{view}.ppm", spec.id);
            save_ppm(&out_dir.join(&rel), &render_target_view(spec, view, TARGET_EXTENT))?;
            views.push(rel);
        }
        targets.insert(spec.id.clone(), views);
    }

    let train_count = config.train_scene_count();
    let all_indices: Vec<usize> = (0..roster.len()).collect();
    let train_indices: Vec<usize> = roster
        .iter()
        .enumerate()
        .filter(|(_, s)| !config.holdout_ids.contains(&s.id))
        .map(|(i, _)| i)
        .collect();

    let mut splits = Splits::default();
    for s in 0..config.num_scenes {
        let in_train = s < train_count;
        let allowed = if in_train { &train_indices } else { &all_indices };
        let (image, annotations, distractors) = render_scene(config, &roster, allowed, s);
        let rel = format!("scenes/scene{s:04}.ppm");
        save_ppm(&out_dir.join(&rel), &image)?;
        let record = SceneRecord { image: rel, annotations, distractors };
        if in_train {
            splits.train.push(record);
        } else {
            splits.test.push(record);
        }
    }

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed: config.seed,
        image_size: config.image_size,
        holdout_ids: config.holdout_ids.clone(),
        targets,
        splits,
        instances: roster,
    };
    validate_manifest(&manifest, out_dir)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(out_dir.join("manifest.json"), text)?;
    Ok(manifest)
}

/// Count pixels in `image` that quantize to either tone of `spec` inside
/// the half-open rect `[x1, y1, x2, y2]` — the audit behind recorded
/// occlusion fractions.
pub fn count_tone_pixels(image: &Tensor<f32>, spec: &InstanceSpec, rect: [usize; 4]) -> usize {
    let (_, _, h, w) = image.dims4().expect("audit wants [1, 3, H, W]");
    let (a, b) = glyph_tones_u8(&spec.glyph);
    let plane = h * w;
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut count = 0;
    for r in rect[1]..rect[3] {
        for c in rect[0]..rect[2] {
            let px = [
                q(image.data()[r * w + c]),
                q(image.data()[plane + r * w + c]),
                q(image.data()[2 * plane + r * w + c]),
            ];
            if px == a || px == b {
                count += 1;
            }
        }
    }
    count
}
