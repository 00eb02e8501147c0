//! End-to-end tests of the `tdid` binary: exit codes, rerun determinism
//! of every artifact-producing subcommand, and schema validity of every
//! JSON output.
//!
//! A shared fixture (tiny dataset + checkpoint) is built once; individual
//! tests rerun commands against it and compare bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tdid_cli::schema;
use tdid_core::config::{EmbedFeature, ModelConfig};
use tdid_core::train::RunConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tdid"))
}

fn ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn tdid");
    assert!(
        out.status.success(),
        "command failed: {cmd:?}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every file under `root`, keyed by relative path.
fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn assert_trees_equal(a: &Path, b: &Path) {
    let ta = tree_bytes(a);
    let tb = tree_bytes(b);
    let ka: Vec<&String> = ta.keys().collect();
    let kb: Vec<&String> = tb.keys().collect();
    assert_eq!(ka, kb, "file lists differ between {a:?} and {b:?}");
    for (name, bytes) in &ta {
        assert_eq!(bytes, &tb[name], "file `{name}` differs between runs");
    }
}

fn check_schema(schema_text: &str, value: &Value, what: &str) {
    schema::validate_text(schema_text, value).unwrap_or_else(|e| panic!("{what}: {e}"));
}

const GEN_ARGS: [&str; 20] = [
    "--seed",
    "7",
    "--instances",
    "2",
    "--scenes",
    "6",
    "--image-size",
    "64",
    "--canonical-size",
    "24",
    "--scale-min",
    "1.0",
    "--scale-max",
    "1.1",
    "--max-occlusion",
    "0",
    "--distractors",
    "1",
    "--train-fraction",
    "0.7",
];

struct Fixture {
    _dir: tempfile::TempDir,
    dataset: PathBuf,
    config: PathBuf,
    ckpt: PathBuf,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

/// A 2-instance / 6-scene dataset, a reduced-size run config, and one
/// 20-iteration checkpoint trained from them.
fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let dataset = dir.path().join("data");
        ok(bin().arg("gen-data").arg("--out").arg(&dataset).args(GEN_ARGS));

        let run = RunConfig {
            model: ModelConfig {
                backbone_channels: vec![8, 16],
                backbone_stride: 4,
                embed_features: vec![EmbedFeature::Cc, EmbedFeature::Diff],
                feature_dim: 16,
                anchor_scales: vec![16.0, 24.0, 32.0],
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        };
        let config = dir.path().join("run.json");
        fs::write(&config, serde_json::to_string_pretty(&run).unwrap()).unwrap();

        let ckpt = dir.path().join("ckpt");
        train_into(&dataset, &config, &ckpt);
        Fixture { _dir: dir, dataset, config, ckpt }
    })
}

fn train_into(dataset: &Path, config: &Path, out: &Path) -> Output {
    ok(bin()
        .arg("train")
        .arg("--dataset")
        .arg(dataset)
        .arg("--config")
        .arg(config)
        .args(["--seed", "5", "--iters", "20"])
        .arg("--out")
        .arg(out))
}

#[test]
fn help_exits_zero() {
    ok(bin().arg("--help"));
    ok(bin().args(["train", "--help"]));
}

#[test]
fn usage_errors_exit_two() {
    for args in [vec![], vec!["no-such-command"], vec!["train"], vec!["eval", "--split", "x"]] {
        let out = bin().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "args {args:?}");
    }
}

#[test]
fn runtime_errors_exit_one() {
    let out = bin()
        .args(["eval", "--dataset", "/nonexistent", "--checkpoint", "/nonexistent"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: "), "stderr was: {stderr}");
}

#[test]
fn gen_data_is_deterministic_and_manifest_validates() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(bin().arg("gen-data").arg("--out").arg(&a).args(GEN_ARGS));
    ok(bin().arg("gen-data").arg("--out").arg(&b).args(GEN_ARGS));
    assert_trees_equal(&a, &b);

    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    check_schema(schema::DATASET_MANIFEST, &manifest, "manifest.json");

    // The shared fixture assumes this seed puts ground truth in both splits.
    for split in ["train", "test"] {
        let scenes = manifest["splits"][split].as_array().unwrap();
        let annotations: usize =
            scenes.iter().map(|s| s["annotations"].as_array().unwrap().len()).sum();
        assert!(annotations > 0, "{split} split has no ground truth");
    }
}

#[test]
fn train_is_deterministic_and_artifacts_validate() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let again = dir.path().join("ckpt_again");
    let out = train_into(&fx.dataset, &fx.config, &again);
    assert_trees_equal(&fx.ckpt, &again);
    assert!(String::from_utf8_lossy(&out.stdout).contains("trained 20 iterations"));

    let run: Value =
        serde_json::from_str(&fs::read_to_string(fx.ckpt.join("run.json")).unwrap()).unwrap();
    check_schema(schema::RUN_CONFIG, &run, "run.json");
    let model: Value =
        serde_json::from_str(&fs::read_to_string(fx.ckpt.join("model.json")).unwrap()).unwrap();
    check_schema(schema::MODEL_CONFIG, &model, "model.json");

    let log = fs::read_to_string(fx.ckpt.join("train_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert!(!lines.is_empty(), "training log is empty");
    for line in lines {
        let entry: Value = serde_json::from_str(line).unwrap();
        check_schema(schema::TRAIN_LOG_LINE, &entry, "train_log.jsonl line");
    }
}

fn eval_fixture(out_json: &Path, split: &str, buckets: &str, env: &[(&str, &str)]) -> Output {
    let fx = fixture();
    let mut cmd = bin();
    cmd.arg("eval")
        .arg("--dataset")
        .arg(&fx.dataset)
        .arg("--checkpoint")
        .arg(&fx.ckpt)
        .args(["--split", split, "--buckets", buckets])
        .arg("--out")
        .arg(out_json);
    for (k, v) in env {
        cmd.env(k, v);
    }
    ok(&mut cmd)
}

#[test]
fn eval_is_deterministic_and_output_validates() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let out_a = eval_fixture(&a, "train", "canonical", &[]);
    let out_b = eval_fixture(&b, "train", "canonical", &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "eval reruns differ");
    assert_eq!(out_a.stdout, out_b.stdout, "eval stdout differs between reruns");

    let report: Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    check_schema(schema::EVAL_OUTPUT, &report, "eval --out");
    assert_eq!(report["split"], "train");
    assert!(report["result"]["buckets"].as_object().unwrap().contains_key("all"));
}

#[test]
fn eval_quartile_buckets_cover_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("q.json");
    eval_fixture(&out, "train", "quartiles", &[]);
    let report: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    check_schema(schema::EVAL_OUTPUT, &report, "eval --out (quartiles)");
    let buckets = report["result"]["buckets"].as_object().unwrap();
    assert_eq!(buckets.len(), 4, "want 4 quartile rows, got {buckets:?}");
    assert!(buckets.keys().all(|k| k.starts_with('q')), "rows: {buckets:?}");
}

#[test]
fn worker_thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.json");
    let three = dir.path().join("three.json");
    eval_fixture(&one, "test", "canonical", &[]);
    eval_fixture(&three, "test", "canonical", &[("TDID_THREADS", "3")]);
    assert_eq!(fs::read(&one).unwrap(), fs::read(&three).unwrap());
}

#[test]
fn detect_prints_valid_json_and_dumps_image() {
    let fx = fixture();
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(fx.dataset.join("manifest.json")).unwrap())
            .unwrap();
    let scene_rel = manifest["splits"]["test"][0]["image"].as_str().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("overlay.ppm");

    let out = ok(bin()
        .arg("detect")
        .arg("--checkpoint")
        .arg(&fx.ckpt)
        .arg("--scene")
        .arg(fx.dataset.join(scene_rel))
        .args(["--target-id", "inst00"])
        .arg("--dump")
        .arg(&dump));

    let detections: Value = serde_json::from_slice(&out.stdout).expect("stdout is JSON");
    check_schema(schema::DETECTIONS, &detections, "detect stdout");
    for det in detections.as_array().unwrap() {
        assert_eq!(det["target_id"], "inst00");
    }

    let overlay = fs::read(&dump).unwrap();
    assert!(overlay.starts_with(b"P6\n"), "dump is not a binary PPM");
}

#[test]
fn detect_rejects_unknown_target() {
    let fx = fixture();
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(fx.dataset.join("manifest.json")).unwrap())
            .unwrap();
    let scene_rel = manifest["splits"]["test"][0]["image"].as_str().unwrap();
    let out = bin()
        .arg("detect")
        .arg("--checkpoint")
        .arg(&fx.ckpt)
        .arg("--scene")
        .arg(fx.dataset.join(scene_rel))
        .args(["--target-id", "no-such-instance"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_prints_all_seven_combos() {
    let fx = fixture();
    let out = ok(bin()
        .arg("ablate")
        .arg("--dataset")
        .arg(&fx.dataset)
        .args(["--seed", "1", "--iters", "2"]));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let expected = ["IMG", "CC", "DIFF", "IMG+CC", "IMG+DIFF", "CC+DIFF", "IMG+CC+DIFF"];
    let rows: Vec<&str> = stdout
        .lines()
        .filter_map(|l| l.split_whitespace().next())
        .filter(|tok| expected.contains(tok))
        .collect();
    assert_eq!(rows, expected, "combo rows out of order or missing:\n{stdout}");
}

#[test]
fn selfcheck_exits_zero() {
    let out = ok(bin().arg("selfcheck"));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("selfcheck passed"), "stdout:\n{stdout}");
    assert!(!stdout.contains("FAIL"), "stdout:\n{stdout}");
}
