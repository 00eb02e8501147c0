//! Layout of a training output directory: model weights, the two config
//! sidecars, the target feature cache, and the training log.

use std::fs;
use std::path::{Path, PathBuf};

use tdid_core::postprocess::TargetFeatureCache;
use tdid_core::{Error, Model, ModelConfig, Result, RunConfig};

pub const MODEL_FILE: &str = "model.ckpt";
pub const MODEL_CONFIG_FILE: &str = "model.json";
pub const RUN_CONFIG_FILE: &str = "run.json";
pub const CACHE_FILE: &str = "tcache.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

/// Everything a downstream command needs from a finished training run.
pub struct Bundle {
    pub model: Model<f32>,
    pub run: RunConfig,
    pub cache: TargetFeatureCache,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read `{}`: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("cannot parse `{}`: {e}", path.display())))
}

/// Write weights, both sidecars, and the feature cache into `dir`
/// (created if missing). The training log is appended separately while
/// training runs.
pub fn save(dir: &Path, model: &Model<f32>, run: &RunConfig, cache: &TargetFeatureCache) -> Result<()> {
    fs::create_dir_all(dir)?;
    model.save(&dir.join(MODEL_FILE))?;
    write_json(&dir.join(MODEL_CONFIG_FILE), model.config())?;
    write_json(&dir.join(RUN_CONFIG_FILE), run)?;
    cache.save(&dir.join(CACHE_FILE))?;
    Ok(())
}

/// Load a checkpoint directory written by [`save`].
pub fn load(dir: &Path) -> Result<Bundle> {
    let config: ModelConfig = read_json(&dir.join(MODEL_CONFIG_FILE))?;
    let run: RunConfig = read_json(&dir.join(RUN_CONFIG_FILE))?;
    if run.model != config {
        return Err(Error::config(format!(
            "checkpoint sidecars disagree: `{}` and `{}` hold different model configs",
            MODEL_CONFIG_FILE, RUN_CONFIG_FILE
        )));
    }
    let model = Model::load(config, &dir.join(MODEL_FILE))?;
    let cache = TargetFeatureCache::load(&dir.join(CACHE_FILE))?;
    Ok(Bundle { model, run, cache })
}

/// Path of the training log inside a checkpoint directory.
pub fn train_log_path(dir: &Path) -> PathBuf {
    dir.join(TRAIN_LOG_FILE)
}
