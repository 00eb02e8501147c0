//! Target-driven instance detection: find user-specified object instances
//! in scenes, where the instance of interest is supplied as a small set of
//! template views at inference time rather than baked in as a class at
//! training time.
//!
//! Everything numeric is implemented directly on `Vec<f32>`/`Vec<f64>`
//! buffers — a small reverse-mode autodiff tape ([`graph`]), a convolutional
//! detector conditioned on target features ([`model`]), anchor box machinery
//! ([`anchors`], [`boxes`]), training losses ([`loss`]), non-maximum
//! suppression and cached-target inference ([`postprocess`]), and a
//! detection-quality evaluator ([`evaluate`]). All randomness flows through
//! one splittable generator ([`rng`]), so every pipeline stage is bit-for-bit
//! reproducible from a seed.

pub mod anchors;
pub mod boxes;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod graph;
pub mod loss;
pub mod model;
pub mod params;
pub mod postprocess;
pub mod train;
pub mod rng;
pub mod tensor;

pub use anchors::{assign_anchors, generate_anchors, AnchorAssignment, AnchorLabel, AnchorSet};
pub use boxes::{decode_box, encode_box, iou, Box};
pub use config::{EmbedFeature, ModelConfig};
pub use error::{Error, Result};
pub use evaluate::{
    average_precision, classify, evaluate_scenes, match_detections, Accumulator, Counts,
    EvalResult, EvalScene, MatchOutcome, SizeBucket,
};
pub use graph::{ClsSample, Graph, RegSample, Var};
pub use loss::{detection_loss, LossBreakdown};
pub use model::{HeadOutput, Model, Session};
pub use params::{ParamId, ParamStore, Sgd};
pub use postprocess::{
    build_cache, detect, detect_all, nms, Detection, TargetFeatureCache, TargetViews,
};
pub use rng::SplitMix64;
pub use tensor::{Scalar, Tensor};
pub use train::{
    load_train_set, train_model, train_step, IterationLog, RunConfig, TrainScene, TrainSet,
};
