//! `tdid ablate`: train every embedding-branch combination on one dataset
//! with identical seeds and budgets, then print a mAP matrix whose rows
//! are the combinations and whose columns are size buckets plus "All".

use std::path::PathBuf;

use tdid_core::data::{load_manifest, load_target_images};
use tdid_core::postprocess::build_cache;
use tdid_core::{load_train_set, train_model, EmbedFeature, Model, Result, RunConfig};

use crate::eval_cmd::{eval_records, quartile_buckets};
use crate::worker_threads;

#[derive(clap::Args)]
pub struct Args {
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Training seed shared by every combination.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Iteration budget shared by every combination.
    #[arg(long)]
    pub iters: Option<usize>,
}

/// The seven branch combinations, in presentation order. The CC+DIFF row
/// matches the default model configuration.
pub fn combos() -> [(&'static str, Vec<EmbedFeature>); 7] {
    use EmbedFeature::{Cc, Diff, Img};
    [
        ("IMG", vec![Img]),
        ("CC", vec![Cc]),
        ("DIFF", vec![Diff]),
        ("IMG+CC", vec![Img, Cc]),
        ("IMG+DIFF", vec![Img, Diff]),
        ("CC+DIFF", vec![Cc, Diff]),
        ("IMG+CC+DIFF", vec![Img, Cc, Diff]),
    ]
}

pub fn run(args: Args) -> Result<()> {
    let manifest = load_manifest(&args.dataset.join("manifest.json"))?;
    let set = load_train_set(&args.dataset, &manifest)?;
    let targets = load_target_images(&args.dataset, &manifest)?;
    let ids = manifest.instance_ids();
    let records = &manifest.splits.test;
    let buckets = quartile_buckets(records)?;
    let threads = worker_threads();

    let mut rows = Vec::new();
    for (label, features) in combos() {
        let mut run = RunConfig::default();
        run.model.embed_features = features;
        if let Some(seed) = args.seed {
            run.seed = seed;
        }
        if let Some(iters) = args.iters {
            run.iterations = iters;
        }
        run.validate()?;
        let mut model = Model::<f32>::init(run.model.clone(), run.seed)?;
        train_model(&mut model, &set, &run, |_| {})?;
        let cache = build_cache(&model, &targets)?;
        let result =
            eval_records(&model, &cache, &ids, &args.dataset, records, &buckets, threads)?;
        rows.push((label, result));
    }

    let bucket_names: Vec<&String> = rows[0].1.buckets.keys().collect();
    print!("{:<14}", "features");
    for name in &bucket_names {
        print!(" {name:>16}");
    }
    println!(" {:>8}", "All");
    for (label, result) in &rows {
        print!("{label:<14}");
        for name in &bucket_names {
            print!(" {:>16.4}", result.buckets[*name]);
        }
        println!(" {:>8.4}", result.map);
    }
    Ok(())
}
