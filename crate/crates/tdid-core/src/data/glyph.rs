//! Procedural glyph instances.
//!
//! Each instance is a square tile filled with a two-tone pattern. The
//! pattern is a pure function of canonical coordinates, so a tile can be
//! rendered at any pixel size (or sheared) by inverse-mapping each output
//! pixel into canonical space — no resampling filter, and both tone
//! colors survive quantization exactly. Instances are vivid (high
//! saturation and value) while scene backgrounds stay muted, which is
//! what makes pixel-level occlusion audits unambiguous.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Saturation/value used for both pattern tones. Backgrounds cap value at
/// [`MUTED_VALUE_MAX`], strictly below this, so no background pixel can
/// quantize to a pattern color.
pub const VIVID_SATURATION: f64 = 0.9;
pub const VIVID_VALUE: f64 = 0.9;
pub const MUTED_VALUE_MAX: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Stripes,
    Checker,
    Dots,
    Rings,
}

/// Appearance parameters for one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub kind: PatternKind,
    /// Hue of the dominant tone, in `[0, 1)`.
    pub base_hue: f64,
    /// Hue of the second tone, in `[0, 1)`.
    pub secondary_hue: f64,
    /// Feature period of the pattern, in canonical pixels.
    pub pattern_scale: f64,
    /// Edge length of the canonical (unscaled) tile, in pixels.
    pub canonical_size: usize,
}

/// A named instance: identity plus appearance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub id: String,
    pub glyph: Glyph,
}

/// Hue offset between a glyph's two tones. Kept small so each instance owns
/// a narrow band of the color wheel: channelwise max-pooled features then
/// separate instances by color alone. A half-wheel offset would give
/// neighboring roster entries the same color pair with the roles swapped,
/// which per-channel maxima cannot tell apart.
pub const TONE_HUE_OFFSET: f64 = 0.12;

/// Deterministic roster of `n` distinct instances. Base hues are spread
/// evenly around the color wheel with the secondary tone a small offset
/// away, pattern kinds and scales cycle, so every appearance tuple is
/// unique (the hue alone already is).
pub fn instance_roster(n: usize, canonical_size: usize) -> Vec<InstanceSpec> {
    let kinds = [PatternKind::Stripes, PatternKind::Checker, PatternKind::Dots, PatternKind::Rings];
    (0..n)
        .map(|i| {
            let base_hue = i as f64 / n as f64;
            InstanceSpec {
                id: format!("inst{i:02}"),
                glyph: Glyph {
                    kind: kinds[i % kinds.len()],
                    base_hue,
                    secondary_hue: (base_hue + TONE_HUE_OFFSET).fract(),
                    pattern_scale: 4.0 + 2.0 * ((i / kinds.len()) % 3) as f64,
                    canonical_size,
                },
            }
        })
        .collect()
}

/// Standard HSV→RGB conversion; `h` in `[0, 1)`, output in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, t],
    }
}

fn tone(hue: f64) -> [f32; 3] {
    let rgb = hsv_to_rgb(hue, VIVID_SATURATION, VIVID_VALUE);
    [rgb[0] as f32, rgb[1] as f32, rgb[2] as f32]
}

/// The two tone colors of a glyph, as stored in float tensors.
pub fn glyph_tones(glyph: &Glyph) -> ([f32; 3], [f32; 3]) {
    (tone(glyph.base_hue), tone(glyph.secondary_hue))
}

/// The same two tones after 8-bit quantization, for byte-level audits of
/// saved images.
pub fn glyph_tones_u8(glyph: &Glyph) -> ([u8; 3], [u8; 3]) {
    let q = |c: [f32; 3]| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    let (a, b) = glyph_tones(glyph);
    (q(a), q(b))
}

/// Whether canonical point `(x, y)` belongs to the dominant tone.
pub fn pattern_at(glyph: &Glyph, x: f64, y: f64) -> bool {
    let s = glyph.pattern_scale;
    match glyph.kind {
        PatternKind::Stripes => ((x + y) / s).floor().rem_euclid(2.0) == 0.0,
        PatternKind::Checker => {
            ((x / s).floor() + (y / s).floor()).rem_euclid(2.0) == 0.0
        }
        PatternKind::Dots => {
            let period = 2.0 * s;
            let dx = x.rem_euclid(period) - s;
            let dy = y.rem_euclid(period) - s;
            dx * dx + dy * dy > (0.6 * s) * (0.6 * s)
        }
        PatternKind::Rings => {
            let c = glyph.canonical_size as f64 / 2.0;
            let d = ((x - c) * (x - c) + (y - c) * (y - c)).sqrt();
            (d / s).floor().rem_euclid(2.0) == 0.0
        }
    }
}

fn put_pixel(image: &mut Tensor<f32>, row: usize, col: usize, color: [f32; 3]) {
    let (_, _, h, w) = image.dims4().expect("painting wants [1, 3, H, W]");
    debug_assert!(row < h && col < w);
    let plane = h * w;
    for (ch, &v) in color.iter().enumerate() {
        image.data_mut()[ch * plane + row * w + col] = v;
    }
}

/// Paint the glyph into `image` over the half-open pixel rectangle
/// `[x1, x1+size) × [y1, y1+size)`. Every painted pixel takes one of the
/// two tone colors: the pattern is evaluated at the canonical point each
/// output pixel center maps back to.
pub fn paint_glyph(image: &mut Tensor<f32>, glyph: &Glyph, x1: usize, y1: usize, size: usize) {
    let (primary, secondary) = glyph_tones(glyph);
    let ratio = glyph.canonical_size as f64 / size as f64;
    for r in 0..size {
        for c in 0..size {
            let u = (c as f64 + 0.5) * ratio;
            let v = (r as f64 + 0.5) * ratio;
            let color = if pattern_at(glyph, u, v) { primary } else { secondary };
            put_pixel(image, y1 + r, x1 + c, color);
        }
    }
}

/// Horizontal shear factor used for the second target view.
pub const SHEAR_FACTOR: f64 = 0.25;

/// Canvas value for target views. Black matters: zero input drives zero
/// activations through the feature extractor (zero-init biases, ReLU), so
/// max-pooling a target view reads only glyph responses. A bright canvas
/// instead dominates the pooled vector with background responses shared by
/// every instance, and the query embedding loses its identity signal.
pub const TARGET_CANVAS_VALUE: f32 = 0.0;

/// Render a standalone target view: the glyph centered on a black canvas of
/// extent `extent`. View 0 is the plain tile; view 1 shears it horizontally
/// by [`SHEAR_FACTOR`] about its center row.
pub fn render_target_view(spec: &InstanceSpec, view: usize, extent: usize) -> Tensor<f32> {
    let glyph = &spec.glyph;
    let size = glyph.canonical_size;
    assert!(size <= extent, "glyph must fit the target canvas");
    let margin = (extent - size) / 2;
    let mut image = Tensor::full(vec![1, 3, extent, extent], TARGET_CANVAS_VALUE);
    let (primary, secondary) = glyph_tones(glyph);
    let shear = if view == 0 { 0.0 } else { SHEAR_FACTOR };
    let center_row = size as f64 / 2.0;
    for r in 0..extent {
        for c in 0..extent {
            let y = r as f64 + 0.5 - margin as f64;
            let x = c as f64 + 0.5 - margin as f64 - shear * (y - center_row);
            if x >= 0.0 && x < size as f64 && y >= 0.0 && y < size as f64 {
                let color = if pattern_at(glyph, x, y) { primary } else { secondary };
                put_pixel(&mut image, r, c, color);
            }
        }
    }
    image
}
