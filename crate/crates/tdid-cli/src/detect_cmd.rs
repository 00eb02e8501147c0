//! `tdid detect`: score one cached target against one scene image.

use std::path::PathBuf;

use tdid_core::data::{load_ppm, save_ppm};
use tdid_core::postprocess::{detect, DEFAULT_SCORE_THRESHOLD};
use tdid_core::Result;

use crate::{bundle, draw};

#[derive(clap::Args)]
pub struct Args {
    /// Checkpoint directory written by `tdid train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene image (binary PPM).
    #[arg(long)]
    pub scene: PathBuf,
    /// Which cached target to look for.
    #[arg(long)]
    pub target_id: String,
    /// Write the scene with boxes and scores burned in to this path.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    let loaded = bundle::load(&args.checkpoint)?;
    let scene = load_ppm(&args.scene)?;
    let detections = detect(
        &loaded.model,
        &scene,
        &args.target_id,
        &loaded.cache,
        DEFAULT_SCORE_THRESHOLD,
    )?;
    println!("{}", serde_json::to_string_pretty(&detections)?);
    if let Some(dump) = &args.dump {
        let mut annotated = scene;
        draw::draw_detections(&mut annotated, &detections);
        save_ppm(dump, &annotated)?;
    }
    Ok(())
}
