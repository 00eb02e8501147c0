//! `tdid eval`: run a checkpoint over a dataset split and report mAP.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tdid_core::data::{load_manifest, load_scene_image, SceneRecord};
use tdid_core::evaluate::{evaluate_scenes, EvalResult, EvalScene, SizeBucket};
use tdid_core::postprocess::DEFAULT_SCORE_THRESHOLD;
use tdid_core::{Error, Result, RunConfig};

use crate::{bundle, worker_threads};

#[derive(clap::Args)]
pub struct Args {
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint directory written by `tdid train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Which split to evaluate.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Size-bucket layout: fixed-area rows or per-split area quartiles.
    #[arg(long, value_parser = ["canonical", "quartiles"], default_value = "canonical")]
    pub buckets: String,
    /// Also write the full result as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// What `--out` serializes: the result plus the exact configuration and
/// settings that produced it.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub config: RunConfig,
    pub split: String,
    pub score_threshold: f64,
    pub result: EvalResult,
}

/// Split ground-truth areas into four population quartiles. The returned
/// rows are labeled with their own area ranges rather than the canonical
/// fixed thresholds.
pub fn quartile_buckets(records: &[SceneRecord]) -> Result<Vec<SizeBucket>> {
    let mut areas: Vec<f64> = records
        .iter()
        .flat_map(|r| r.annotations.iter().map(|a| a.to_box().area()))
        .collect();
    if areas.is_empty() {
        return Err(Error::config("cannot build quartile buckets: split has no ground truth"));
    }
    areas.sort_by(|a, b| a.partial_cmp(b).expect("areas are finite"));
    let cut = |k: usize| areas[(areas.len() * k / 4).min(areas.len() - 1)];
    let (p25, p50, p75) = (cut(1), cut(2), cut(3));
    Ok(vec![
        SizeBucket::range(&format!("q1[0,{p25:.0})"), 0.0, p25),
        SizeBucket::range(&format!("q2[{p25:.0},{p50:.0})"), p25, p50),
        SizeBucket::range(&format!("q3[{p50:.0},{p75:.0})"), p50, p75),
        SizeBucket::at_least(&format!("q4[{p75:.0},inf)"), p75),
    ])
}

fn bucket_layout(kind: &str, records: &[SceneRecord]) -> Result<Vec<SizeBucket>> {
    match kind {
        "quartiles" => quartile_buckets(records),
        _ => Ok(SizeBucket::canonical()),
    }
}

/// Evaluate `ids` over `records`, loading scene images on demand.
pub fn eval_records(
    model: &tdid_core::Model<f32>,
    cache: &tdid_core::postprocess::TargetFeatureCache,
    ids: &[String],
    root: &Path,
    records: &[SceneRecord],
    buckets: &[SizeBucket],
    threads: usize,
) -> Result<EvalResult> {
    let owned = records.to_vec();
    let root = root.to_path_buf();
    let load = move |i: usize| -> Result<EvalScene> {
        let record = &owned[i];
        Ok(EvalScene {
            image: load_scene_image(&root, record)?,
            gts: record.ground_truth().into_iter().collect::<BTreeMap<_, _>>(),
        })
    };
    evaluate_scenes(
        model,
        cache,
        ids,
        records.len(),
        load,
        buckets,
        DEFAULT_SCORE_THRESHOLD,
        threads,
    )
}

fn print_table(split: &str, num_scenes: usize, result: &EvalResult) {
    println!("split {split}: {num_scenes} scenes, {} instances", result.per_instance.len());
    println!("mAP@0.5 = {:.4}", result.map);
    println!("{:<18} mAP", "bucket");
    for (name, ap) in &result.buckets {
        println!("  {name:<16} {ap:.4}");
    }
    println!("{:<18} AP", "instance");
    for (id, ap) in &result.per_instance {
        println!("  {id:<16} {ap:.4}");
    }
    let c = &result.counts;
    println!(
        "counts: tp {} fp {} missed {} ({} instances evaluated, {} excluded)",
        c.tp, c.fp, c.missed, c.evaluated_instances, c.excluded_instances
    );
}

pub fn run(args: Args) -> Result<()> {
    let manifest = load_manifest(&args.dataset.join("manifest.json"))?;
    let records = manifest.split(&args.split)?;
    let loaded = bundle::load(&args.checkpoint)?;
    let ids = manifest.instance_ids();
    let buckets = bucket_layout(&args.buckets, records)?;
    let result = eval_records(
        &loaded.model,
        &loaded.cache,
        &ids,
        &args.dataset,
        records,
        &buckets,
        worker_threads(),
    )?;
    print_table(&args.split, records.len(), &result);
    if let Some(out) = &args.out {
        let output = EvalOutput {
            config: loaded.run,
            split: args.split.clone(),
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            result,
        };
        let mut text = serde_json::to_string_pretty(&output)?;
        text.push('\n');
        fs::write(out, text)?;
    }
    Ok(())
}
