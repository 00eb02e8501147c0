//! Dataset manifest: the JSON index at the root of a generated dataset
//! tree, plus loading and validation.
//!
//! Layout on disk:
//!
//! ```text
//! dataset/
//!   manifest.json
//!   scenes/scene0000.ppm ...
//!   targets/<id>/view0.ppm, view1.ppm, ...
//! ```
//!
//! All paths in the manifest are relative to the dataset root.
//! Validation collects *every* problem into one error — a manifest either
//! loads clean or not at all.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boxes::Box;
use crate::data::glyph::InstanceSpec;
use crate::data::ppm::load_ppm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Upper bound (exclusive) on legal occlusion fractions.
pub const MAX_LEGAL_OCCLUSION: f64 = 0.7;

/// One labeled instance occurrence in a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    /// `[x1, y1, x2, y2]` in half-open pixel coordinates.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Fraction of the box covered by an occluder, in `[0, 0.7)`.
    pub occlusion: f64,
}

impl Annotation {
    pub fn to_box(&self) -> Box {
        let [x1, y1, x2, y2] = self.bbox;
        Box { x1, y1, x2, y2 }
    }
}

/// One scene image and its labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    /// Path of the scene image, relative to the dataset root.
    pub image: String,
    pub annotations: Vec<Annotation>,
    /// How many unlabeled clutter rectangles were drawn.
    pub distractors: usize,
}

impl SceneRecord {
    /// Ground-truth boxes grouped by instance id.
    pub fn ground_truth(&self) -> BTreeMap<String, Vec<Box>> {
        let mut out: BTreeMap<String, Vec<Box>> = BTreeMap::new();
        for ann in &self.annotations {
            out.entry(ann.id.clone()).or_default().push(ann.to_box());
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<SceneRecord>,
    pub test: Vec<SceneRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// Seed the tree was generated from.
    pub seed: u64,
    /// Scene edge length in pixels (scenes are square).
    pub image_size: usize,
    /// Instance ids excluded from training scenes and the trainer's
    /// query pool. Their target images still exist so they can be
    /// evaluated zero-shot.
    pub holdout_ids: Vec<String>,
    /// Target view image paths per instance id, relative to the root.
    pub targets: BTreeMap<String, Vec<String>>,
    pub splits: Splits,
    /// Appearance record for each instance (handy for audits and debug
    /// rendering; detection itself never reads it).
    pub instances: Vec<InstanceSpec>,
}

impl DatasetManifest {
    pub fn instance_ids(&self) -> Vec<String> {
        self.targets.keys().cloned().collect()
    }

    pub fn split(&self, name: &str) -> Result<&[SceneRecord]> {
        match name {
            "train" => Ok(&self.splits.train),
            "test" => Ok(&self.splits.test),
            other => Err(Error::config(format!("unknown split `{other}` (want train or test)"))),
        }
    }
}

/// Parse `manifest.json` and validate it against the tree it sits in.
/// Returns the manifest only if every check passes.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    validate_manifest(&manifest, root)?;
    Ok(manifest)
}

/// Check structural invariants and that every referenced file exists.
/// All problems are reported together in [`Error::Manifest`].
pub fn validate_manifest(manifest: &DatasetManifest, root: &Path) -> Result<()> {
    let mut problems = Vec::new();
    if manifest.format_version != FORMAT_VERSION {
        problems.push(format!(
            "format_version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        ));
    }
    if manifest.image_size == 0 {
        problems.push("image_size must be positive".to_string());
    }

    let view_counts: Vec<usize> = manifest.targets.values().map(Vec::len).collect();
    if let Some(&first) = view_counts.first() {
        if first == 0 {
            problems.push("targets must list at least one view per instance".to_string());
        }
        if view_counts.iter().any(|&n| n != first) {
            problems.push("all instances must have the same number of target views".to_string());
        }
    } else {
        problems.push("targets map is empty".to_string());
    }
    for (id, views) in &manifest.targets {
        for view in views {
            if !root.join(view).is_file() {
                problems.push(format!("target `{id}`: missing image {view}"));
            }
        }
    }
    for id in &manifest.holdout_ids {
        if !manifest.targets.contains_key(id) {
            problems.push(format!("holdout id `{id}` has no targets entry"));
        }
    }

    let extent = manifest.image_size as f64;
    for (split, scenes) in [("train", &manifest.splits.train), ("test", &manifest.splits.test)] {
        for (s, scene) in scenes.iter().enumerate() {
            if !root.join(&scene.image).is_file() {
                problems.push(format!("{split} scene {s}: missing image {}", scene.image));
            }
            for (a, ann) in scene.annotations.iter().enumerate() {
                if !manifest.targets.contains_key(&ann.id) {
                    problems.push(format!(
                        "{split} scene {s} annotation {a}: unknown instance id `{}`",
                        ann.id
                    ));
                }
                if split == "train" && manifest.holdout_ids.contains(&ann.id) {
                    problems.push(format!(
                        "{split} scene {s} annotation {a}: held-out instance `{}` in training data",
                        ann.id
                    ));
                }
                let [x1, y1, x2, y2] = ann.bbox;
                let in_bounds = x1 >= 0.0 && y1 >= 0.0 && x2 <= extent && y2 <= extent;
                if !(x2 > x1 && y2 > y1 && in_bounds) {
                    problems.push(format!(
                        "{split} scene {s} annotation {a}: box {:?} is degenerate or out of bounds",
                        ann.bbox
                    ));
                }
                if !(0.0..MAX_LEGAL_OCCLUSION).contains(&ann.occlusion) {
                    problems.push(format!(
                        "{split} scene {s} annotation {a}: occlusion {} outside [0, {MAX_LEGAL_OCCLUSION})",
                        ann.occlusion
                    ));
                }
            }
        }
    }

    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Manifest(problems))
    }
}

/// Absolute path of a scene image.
pub fn scene_path(root: &Path, record: &SceneRecord) -> PathBuf {
    root.join(&record.image)
}

/// Load one scene image as a `[1, 3, H, W]` tensor.
pub fn load_scene_image(root: &Path, record: &SceneRecord) -> Result<Tensor<f32>> {
    load_ppm(&scene_path(root, record))
}

/// Load all target view images, keyed by instance id — the shape
/// [`crate::postprocess::build_cache`] wants.
pub fn load_target_images(
    root: &Path,
    manifest: &DatasetManifest,
) -> Result<BTreeMap<String, Vec<Tensor<f32>>>> {
    let mut out = BTreeMap::new();
    for (id, views) in &manifest.targets {
        let mut images = Vec::with_capacity(views.len());
        for view in views {
            images.push(load_ppm(&root.join(view))?);
        }
        out.insert(id.clone(), images);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::glyph::instance_roster;
    use crate::data::ppm::save_ppm;

    fn tiny_tree() -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        std::fs::create_dir_all(root.join("scenes")).unwrap();
        for id in ["a", "b"] {
            std::fs::create_dir_all(root.join("targets").join(id)).unwrap();
        }
        let img = Tensor::full(vec![1, 3, 8, 8], 0.5);
        save_ppm(&root.join("scenes/scene0000.ppm"), &img).unwrap();
        save_ppm(&root.join("scenes/scene0001.ppm"), &img).unwrap();
        for id in ["a", "b"] {
            for v in 0..2 {
                save_ppm(&root.join(format!("targets/{id}/view{v}.ppm")), &img).unwrap();
            }
        }
        let targets: BTreeMap<String, Vec<String>> = [
            ("a".to_string(), vec!["targets/a/view0.ppm".into(), "targets/a/view1.ppm".into()]),
            ("b".to_string(), vec!["targets/b/view0.ppm".into(), "targets/b/view1.ppm".into()]),
        ]
        .into();
        let scene = |image: &str, id: &str| SceneRecord {
            image: image.to_string(),
            annotations: vec![Annotation { id: id.to_string(), bbox: [1.0, 1.0, 5.0, 6.0], occlusion: 0.0 }],
            distractors: 0,
        };
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            seed: 7,
            image_size: 8,
            holdout_ids: vec![],
            targets,
            splits: Splits {
                train: vec![scene("scenes/scene0000.ppm", "a")],
                test: vec![scene("scenes/scene0001.ppm", "b")],
            },
            instances: instance_roster(2, 4),
        };
        (dir, manifest)
    }

    fn problems(err: Error) -> Vec<String> {
        match err {
            Error::Manifest(list) => list,
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn clean_tree_validates_and_round_trips() {
        let (dir, manifest) = tiny_tree();
        validate_manifest(&manifest, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, manifest);
    }

    #[test]
    fn missing_image_is_reported_with_scene_index_and_path() {
        let (dir, mut manifest) = tiny_tree();
        manifest.splits.test[0].image = "scenes/ghost.ppm".to_string();
        let list = problems(validate_manifest(&manifest, dir.path()).unwrap_err());
        assert_eq!(list.len(), 1);
        assert!(list[0].contains("test scene 0"), "{list:?}");
        assert!(list[0].contains("scenes/ghost.ppm"), "{list:?}");
    }

    #[test]
    fn every_problem_is_collected() {
        let (dir, mut manifest) = tiny_tree();
        manifest.splits.train[0].annotations[0].bbox = [5.0, 1.0, 3.0, 6.0]; // inverted
        manifest.splits.train[0].annotations.push(Annotation {
            id: "nobody".to_string(),
            bbox: [0.0, 0.0, 4.0, 4.0],
            occlusion: 0.9,
        });
        manifest.holdout_ids.push("ghost".to_string());
        let list = problems(validate_manifest(&manifest, dir.path()).unwrap_err());
        assert_eq!(list.len(), 4, "{list:?}");
        assert!(list.iter().any(|p| p.contains("annotation 0") && p.contains("degenerate")));
        assert!(list.iter().any(|p| p.contains("annotation 1") && p.contains("unknown instance")));
        assert!(list.iter().any(|p| p.contains("occlusion 0.9")));
        assert!(list.iter().any(|p| p.contains("holdout id `ghost`")));
    }

    #[test]
    fn holdout_instances_may_not_appear_in_train_scenes() {
        let (dir, mut manifest) = tiny_tree();
        manifest.holdout_ids.push("a".to_string());
        let list = problems(validate_manifest(&manifest, dir.path()).unwrap_err());
        assert_eq!(list.len(), 1);
        assert!(list[0].contains("held-out instance `a`"), "{list:?}");
    }

    #[test]
    fn out_of_bounds_box_names_scene_and_annotation() {
        let (dir, mut manifest) = tiny_tree();
        manifest.splits.test[0].annotations[0].bbox = [1.0, 1.0, 9.0, 6.0];
        let list = problems(validate_manifest(&manifest, dir.path()).unwrap_err());
        assert_eq!(list.len(), 1);
        assert!(list[0].contains("test scene 0 annotation 0"), "{list:?}");
    }

    #[test]
    fn mismatched_view_counts_are_rejected() {
        let (dir, mut manifest) = tiny_tree();
        manifest.targets.get_mut("b").unwrap().pop();
        let list = problems(validate_manifest(&manifest, dir.path()).unwrap_err());
        assert!(list.iter().any(|p| p.contains("same number of target views")), "{list:?}");
    }

    #[test]
    fn load_rejects_invalid_without_partial_result() {
        let (dir, manifest) = tiny_tree();
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        std::fs::remove_file(dir.path().join("targets/b/view1.ppm")).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(problems(err)[0].contains("target `b`"));
    }

    #[test]
    fn ground_truth_groups_by_id() {
        let record = SceneRecord {
            image: "scenes/x.ppm".to_string(),
            annotations: vec![
                Annotation { id: "b".into(), bbox: [0.0, 0.0, 2.0, 2.0], occlusion: 0.0 },
                Annotation { id: "a".into(), bbox: [3.0, 3.0, 5.0, 5.0], occlusion: 0.1 },
                Annotation { id: "b".into(), bbox: [4.0, 0.0, 6.0, 2.0], occlusion: 0.0 },
            ],
            distractors: 1,
        };
        let gts = record.ground_truth();
        assert_eq!(gts["a"].len(), 1);
        assert_eq!(gts["b"].len(), 2);
        assert_eq!(gts["b"][1].x1, 4.0);
    }
}
