//! `tdid gen-data`: wrap the synthetic dataset generator.

use std::path::PathBuf;

use tdid_core::data::GenConfig;
use tdid_core::Result;

#[derive(clap::Args)]
pub struct Args {
    /// Directory the dataset tree is written into.
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed; every image and annotation derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of distinct instances in the roster.
    #[arg(long)]
    pub instances: Option<usize>,
    /// Number of scene images.
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Square scene extent in pixels.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Unscaled glyph edge length in pixels.
    #[arg(long)]
    pub canonical_size: Option<usize>,
    /// Lower bound of the per-placement scale draw.
    #[arg(long)]
    pub scale_min: Option<f64>,
    /// Upper bound of the per-placement scale draw.
    #[arg(long)]
    pub scale_max: Option<f64>,
    /// Largest allowed occlusion fraction per instance.
    #[arg(long)]
    pub max_occlusion: Option<f64>,
    /// Clutter rectangles per scene.
    #[arg(long)]
    pub distractors: Option<usize>,
    /// Leading fraction of scenes assigned to the train split.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Comma-separated instance ids kept out of train scenes and the
    /// train-time query pool.
    #[arg(long, value_delimiter = ',')]
    pub holdout_ids: Vec<String>,
}

/// Fold the optional flags over the generator defaults.
pub fn config_from(args: &Args) -> GenConfig {
    let mut cfg = GenConfig::default();
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.instances {
        cfg.num_instances = v;
    }
    if let Some(v) = args.scenes {
        cfg.num_scenes = v;
    }
    if let Some(v) = args.image_size {
        cfg.image_size = v;
    }
    if let Some(v) = args.canonical_size {
        cfg.canonical_size = v;
    }
    if let Some(v) = args.scale_min {
        cfg.scale_range.0 = v;
    }
    if let Some(v) = args.scale_max {
        cfg.scale_range.1 = v;
    }
    if let Some(v) = args.max_occlusion {
        cfg.max_occlusion = v;
    }
    if let Some(v) = args.distractors {
        cfg.distractors = v;
    }
    if let Some(v) = args.train_fraction {
        cfg.train_fraction = v;
    }
    cfg.holdout_ids = args.holdout_ids.clone();
    cfg
}

pub fn run(args: Args) -> Result<()> {
    let cfg = config_from(&args);
    let manifest = tdid_core::data::generate_dataset(&cfg, &args.out)?;
    println!(
        "wrote {}: {} scenes ({} train / {} test), {} instances, {} held out",
        args.out.display(),
        manifest.splits.train.len() + manifest.splits.test.len(),
        manifest.splits.train.len(),
        manifest.splits.test.len(),
        manifest.targets.len(),
        manifest.holdout_ids.len(),
    );
    Ok(())
}
