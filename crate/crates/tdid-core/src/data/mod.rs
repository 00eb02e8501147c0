//! Synthetic dataset generation and image plumbing.
//!
//! Everything the detector consumes at training and evaluation time comes
//! from here: procedurally textured glyph instances pasted onto cluttered
//! noise backgrounds, binary PPM image IO, and the JSON manifest tying
//! scenes, annotations, and target views together. Generation is a pure
//! function of its config and seed, down to the image bytes.

pub mod gen;
pub mod glyph;
pub mod manifest;
pub mod ppm;

pub use gen::{count_tone_pixels, generate_dataset, GenConfig, TARGET_EXTENT};
pub use glyph::{instance_roster, render_target_view, Glyph, InstanceSpec, PatternKind};
pub use manifest::{
    load_manifest, load_scene_image, load_target_images, validate_manifest, Annotation,
    DatasetManifest, SceneRecord, Splits,
};
pub use ppm::{decode_ppm, encode_ppm, load_ppm, save_ppm};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Zero-pad an image on the right and bottom edges so both spatial extents
/// become multiples of `stride`. Content pixels are untouched and keep
/// their coordinates, so annotations remain valid; an already divisible
/// image comes back unchanged.
pub fn pad_to_stride<T: Scalar>(image: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    if stride == 0 {
        return Err(Error::config("pad stride must be at least 1"));
    }
    let (n, c, h, w) = image.dims4()?;
    let ph = h.div_ceil(stride) * stride;
    let pw = w.div_ceil(stride) * stride;
    if ph == h && pw == w {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros(vec![n, c, ph, pw]);
    let src = image.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for row in 0..h {
            let s = (plane * h + row) * w;
            let d = (plane * ph + row) * pw;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    Ok(out)
}
