//! SGD training loop.
//!
//! Each iteration picks one training scene uniformly, then a query
//! instance that is present in the scene half the time and absent the
//! other half — absent queries drive every anchor negative and teach the
//! detector to stay quiet when the target is missing. One forward pass,
//! one loss, one SGD step. All randomness comes from a single substream
//! of the run seed, so a run is reproducible bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{assign_anchors, generate_anchors};
use crate::boxes::Box;
use crate::config::ModelConfig;
use crate::data::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::loss::detection_loss;
use crate::model::Model;
use crate::params::Sgd;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0000;

/// Everything a training run needs beyond the dataset itself.
/// Fully serializable; checkpoints carry the exact config they used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    /// Iteration at which the learning rate drops by 10×; `None` keeps
    /// it flat.
    pub lr_decay_step: Option<usize>,
    /// Weight on the box-regression term of the loss.
    pub reg_weight: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            iterations: 500,
            lr_decay_step: None,
            reg_weight: 1.0,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// The conventional decay point: 70% of the way through.
    pub fn default_decay_step(iterations: usize) -> usize {
        iterations * 7 / 10
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be positive"));
        }
        if !(self.reg_weight > 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::config("reg_weight must be positive"));
        }
        Ok(())
    }

    fn learning_rate_at(&self, iteration: usize) -> f64 {
        match self.lr_decay_step {
            Some(step) if iteration >= step => self.learning_rate / 10.0,
            _ => self.learning_rate,
        }
    }
}

/// One training scene held in memory: image plus per-instance boxes.
pub struct TrainScene {
    pub image: Tensor<f32>,
    pub boxes_by_id: BTreeMap<String, Vec<Box>>,
}

/// An in-memory training set: scenes, target views, and the pool of
/// instance ids queries are drawn from (held-out ids excluded).
pub struct TrainSet {
    pub scenes: Vec<TrainScene>,
    pub targets: BTreeMap<String, Vec<Tensor<f32>>>,
    pub query_ids: Vec<String>,
}

/// Load the train split of a dataset into memory. Held-out ids are
/// dropped from the query pool (their targets are not loaded either);
/// manifest validation already guarantees they appear in no train scene.
pub fn load_train_set(root: &Path, manifest: &DatasetManifest) -> Result<TrainSet> {
    let query_ids: Vec<String> = manifest
        .targets
        .keys()
        .filter(|id| !manifest.holdout_ids.contains(id))
        .cloned()
        .collect();
    if query_ids.is_empty() {
        return Err(Error::config("no trainable instances: every id is held out"));
    }
    let mut targets = BTreeMap::new();
    for id in &query_ids {
        let mut views = Vec::new();
        for rel in &manifest.targets[id] {
            views.push(crate::data::ppm::load_ppm(&root.join(rel))?);
        }
        targets.insert(id.clone(), views);
    }
    let mut scenes = Vec::new();
    for record in &manifest.splits.train {
        scenes.push(TrainScene {
            image: crate::data::manifest::load_scene_image(root, record)?,
            boxes_by_id: record.ground_truth(),
        });
    }
    if scenes.is_empty() {
        return Err(Error::config("train split is empty"));
    }
    Ok(TrainSet { scenes, targets, query_ids })
}

/// Snapshot of one iteration, handed to the progress callback.
#[derive(Clone, Debug, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub learning_rate: f64,
    pub num_pos: usize,
    pub num_neg: usize,
}

/// How often the trainer reports an [`IterationLog`].
pub const LOG_EVERY: usize = 50;

/// Run one forward/backward/SGD step for a fixed (scene, query) pair.
/// Exposed so smoke tests can drive repeated steps on one example.
pub fn train_step(
    model: &mut Model<f32>,
    scene: &Tensor<f32>,
    target_views: &[Tensor<f32>],
    gts: &[Box],
    sample_seed: u64,
    run: &RunConfig,
    learning_rate: f64,
) -> Result<crate::loss::LossBreakdown> {
    let mut session = model.session(true);
    let head = session.forward(scene, target_views)?;
    let anchors = generate_anchors(
        head.hf,
        head.wf,
        head.feature_stride,
        &model.config().anchor_scales,
        &model.config().anchor_ratios,
    )?;
    let assignment = assign_anchors(&anchors, gts);
    let breakdown = detection_loss(&mut session.graph, &head, &assignment, sample_seed, run.reg_weight)?;
    session.graph.backward(breakdown.total_var)?;
    let grads = session.into_grads();
    model.apply_grads(grads)?;
    let sgd = Sgd {
        learning_rate,
        momentum: run.momentum,
        weight_decay: run.weight_decay,
    };
    model.sgd_step(&sgd)?;
    Ok(breakdown)
}

/// Train `model` in place for `run.iterations` steps. Returns the full
/// per-iteration total-loss history; `on_log` fires every [`LOG_EVERY`]
/// iterations and on the last one. A non-finite loss aborts with an
/// error naming the iteration.
pub fn train_model(
    model: &mut Model<f32>,
    set: &TrainSet,
    run: &RunConfig,
    mut on_log: impl FnMut(&IterationLog),
) -> Result<Vec<f64>> {
    run.validate()?;
    for (id, views) in &set.targets {
        if views.len() != run.model.num_target_views {
            return Err(Error::config(format!(
                "instance `{id}` has {} target views, model wants {}",
                views.len(),
                run.model.num_target_views
            )));
        }
    }
    let mut rng = SplitMix64::substream(run.seed, TRAIN_STREAM);
    let mut history = Vec::with_capacity(run.iterations);
    for iteration in 0..run.iterations {
        let scene = &set.scenes[rng.next_below(set.scenes.len() as u64) as usize];
        let (present, absent): (Vec<&String>, Vec<&String>) = set
            .query_ids
            .iter()
            .partition(|id| scene.boxes_by_id.get(*id).is_some_and(|b| !b.is_empty()));
        // Coin first, then index, so the draw sequence does not depend
        // on which pool wins.
        let want_present = rng.next_f64() < 0.5;
        let pool = if want_present && !present.is_empty() {
            &present
        } else if !absent.is_empty() {
            &absent
        } else {
            &present
        };
        let query = pool[rng.next_below(pool.len() as u64) as usize];
        let sample_seed = rng.next_u64();
        let gts = scene.boxes_by_id.get(query).cloned().unwrap_or_default();
        let learning_rate = run.learning_rate_at(iteration);
        let breakdown = train_step(
            model,
            &scene.image,
            &set.targets[query],
            &gts,
            sample_seed,
            run,
            learning_rate,
        )
        .map_err(|e| {
            Error::config(format!(
                "training diverged at iteration {iteration} (query `{query}`): {e}"
            ))
        })?;
        history.push(breakdown.total);
        if iteration % LOG_EVERY == 0 || iteration + 1 == run.iterations {
            on_log(&IterationLog {
                iteration,
                total: breakdown.total,
                cls: breakdown.cls_loss,
                reg: breakdown.reg_loss,
                learning_rate,
                num_pos: breakdown.num_pos,
                num_neg: breakdown.num_neg,
            });
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EmbedFeature;

    fn tiny_run() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                backbone_channels: vec![4, 8],
                backbone_stride: 4,
                embed_features: vec![EmbedFeature::Cc, EmbedFeature::Diff],
                feature_dim: 8,
                num_target_views: 1,
                anchor_scales: vec![8.0, 16.0],
                anchor_ratios: vec![1.0],
                cc_kernel: 1,
            },
            iterations: 6,
            seed: 3,
            ..RunConfig::default()
        }
    }

    fn tiny_set(rng: &mut SplitMix64) -> TrainSet {
        let mut img = |h: usize, w: usize| {
            let data = (0..3 * h * w).map(|_| rng.range_f64(0.1, 0.9) as f32).collect();
            Tensor::new(vec![1, 3, h, w], data).unwrap()
        };
        let mut boxes = BTreeMap::new();
        boxes.insert("a".to_string(), vec![Box::new(2.0, 2.0, 14.0, 14.0).unwrap()]);
        let scene = TrainScene { image: img(24, 24), boxes_by_id: boxes };
        let targets: BTreeMap<String, Vec<Tensor<f32>>> = [
            ("a".to_string(), vec![img(12, 12)]),
            ("b".to_string(), vec![img(12, 12)]),
        ]
        .into();
        TrainSet {
            scenes: vec![scene],
            targets,
            query_ids: vec!["a".to_string(), "b".to_string()],
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = tiny_run();
        let mut rng = SplitMix64::new(8);
        let set = tiny_set(&mut rng);
        let mut model_a = Model::<f32>::init(run.model.clone(), 5).unwrap();
        let mut model_b = Model::<f32>::init(run.model.clone(), 5).unwrap();
        let ha = train_model(&mut model_a, &set, &run, |_| {}).unwrap();
        let hb = train_model(&mut model_b, &set, &run, |_| {}).unwrap();
        assert_eq!(ha.len(), 6);
        for (a, b) in ha.iter().zip(&hb) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (pa, pb) in model_a.params().iter().zip(model_b.params().iter()) {
            assert_eq!(pa.0, pb.0);
            let bits_a: Vec<u32> = pa.1.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = pb.1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn parameters_actually_move() {
        let run = tiny_run();
        let mut rng = SplitMix64::new(8);
        let set = tiny_set(&mut rng);
        let mut model = Model::<f32>::init(run.model.clone(), 5).unwrap();
        let before: Vec<f32> = model.params().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        train_model(&mut model, &set, &run, |_| {}).unwrap();
        let after: Vec<f32> = model.params().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        assert_ne!(before, after);
    }

    #[test]
    fn logs_fire_on_schedule() {
        let mut run = tiny_run();
        run.iterations = LOG_EVERY + 2;
        let mut rng = SplitMix64::new(8);
        let set = tiny_set(&mut rng);
        let mut model = Model::<f32>::init(run.model.clone(), 5).unwrap();
        let mut seen = Vec::new();
        train_model(&mut model, &set, &run, |log| seen.push(log.iteration)).unwrap();
        assert_eq!(seen, vec![0, LOG_EVERY, LOG_EVERY + 1]);
    }

    #[test]
    fn lr_decay_applies_at_step() {
        let run = RunConfig {
            lr_decay_step: Some(10),
            ..RunConfig::default()
        };
        assert_eq!(run.learning_rate_at(9), 0.001);
        assert_eq!(run.learning_rate_at(10), 0.0001);
        assert_eq!(RunConfig::default_decay_step(500), 350);
    }

    #[test]
    fn view_count_mismatch_is_rejected() {
        let mut run = tiny_run();
        run.model.num_target_views = 3;
        let mut rng = SplitMix64::new(8);
        let set = tiny_set(&mut rng);
        let mut model = Model::<f32>::init(run.model.clone(), 5).unwrap();
        let err = train_model(&mut model, &set, &run, |_| {}).unwrap_err();
        assert!(err.to_string().contains("target views"));
    }

    #[test]
    fn bad_run_configs_are_rejected() {
        let mut run = tiny_run();
        run.learning_rate = 0.0;
        assert!(run.validate().is_err());
        let mut run = tiny_run();
        run.momentum = 1.0;
        assert!(run.validate().is_err());
        let mut run = tiny_run();
        run.iterations = 0;
        assert!(run.validate().is_err());
    }
}
