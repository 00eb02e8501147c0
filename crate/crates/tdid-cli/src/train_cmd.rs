//! `tdid train`: train on a dataset and write a checkpoint directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use tdid_core::data::{load_manifest, load_target_images};
use tdid_core::postprocess::build_cache;
use tdid_core::{load_train_set, train_model, Error, Model, Result, RunConfig};

use crate::bundle;

#[derive(clap::Args)]
pub struct Args {
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Optional run-config JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training seed (PRNG for sampling and initialization).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of SGD iterations.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Checkpoint directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Extra comma-separated instance ids excluded from the query pool,
    /// on top of any holdout recorded in the dataset manifest.
    #[arg(long, value_delimiter = ',')]
    pub holdout_ids: Vec<String>,
}

/// Resolve the effective run config from file and flag overrides.
pub fn run_config_from(args: &Args) -> Result<RunConfig> {
    let mut run = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read `{}`: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("cannot parse `{}`: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        run.seed = seed;
    }
    if let Some(iters) = args.iters {
        run.iterations = iters;
    }
    Ok(run)
}

pub fn run(args: Args) -> Result<()> {
    let run = run_config_from(&args)?;
    run.validate()?;
    let mut manifest = load_manifest(&args.dataset.join("manifest.json"))?;
    for id in &args.holdout_ids {
        if !manifest.targets.contains_key(id) {
            return Err(Error::config(format!(
                "--holdout-ids names unknown instance `{id}`"
            )));
        }
        if !manifest.holdout_ids.contains(id) {
            manifest.holdout_ids.push(id.clone());
        }
    }
    let set = load_train_set(&args.dataset, &manifest)?;

    fs::create_dir_all(&args.out)?;
    let log_file = File::create(bundle::train_log_path(&args.out))?;
    let mut log = BufWriter::new(log_file);
    let mut log_error: Option<std::io::Error> = None;

    let mut model = Model::<f32>::init(run.model.clone(), run.seed)?;
    let history = train_model(&mut model, &set, &run, |entry| {
        if log_error.is_none() {
            let result = serde_json::to_string(entry)
                .map_err(std::io::Error::other)
                .and_then(|line| writeln!(log, "{line}"));
            if let Err(e) = result {
                log_error = Some(e);
            }
        }
    })?;
    if let Some(e) = log_error {
        return Err(e.into());
    }
    log.flush()?;

    // Cache features for every instance in the dataset, held-out ones
    // included: detection on a held-out target needs its features even
    // though training never queried it.
    let targets = load_target_images(&args.dataset, &manifest)?;
    let cache = build_cache(&model, &targets)?;
    bundle::save(&args.out, &model, &run, &cache)?;

    let final_loss = history.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} iterations (final loss {final_loss:.6}), checkpoint in {}",
        run.iterations,
        args.out.display()
    );
    Ok(())
}
