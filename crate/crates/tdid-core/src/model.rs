//! The detector network: a small shared-weight convolutional backbone, a
//! joint embedding that conditions scene features on pooled target
//! features, and 1x1 classification/regression heads over the anchor grid.
//!
//! The same backbone weights process scene and target images. Target
//! features are global-max-pooled to per-channel vectors and injected into
//! the scene map two ways: depthwise cross-correlation (CC) and broadcast
//! subtraction (DIFF). Either branch can be disabled, and the raw scene map
//! (IMG) can be passed through instead — an IMG-only model provably cannot
//! see the target at all, which the tests pin down as exact invariance.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::checkpoint;
use crate::config::{EmbedFeature, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore, Sgd};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

struct Layers {
    backbone: Vec<ConvLayer>,
    cc: Option<ConvLayer>,
    diff: Option<ConvLayer>,
    fuse: ConvLayer,
    cls: ConvLayer,
    reg: ConvLayer,
}

/// Raw head predictions over the feature grid, as graph nodes so the loss
/// can extend the tape. Anchor `(i * wf + j) * anchors_per_cell + slot`
/// reads classification logits from channels `2*slot` (background) and
/// `2*slot + 1` (foreground), and deltas from channels `4*slot .. 4*slot+4`.
pub struct HeadOutput {
    pub cls_logits: Var,
    pub reg_deltas: Var,
    pub feature_stride: usize,
    pub hf: usize,
    pub wf: usize,
    pub anchors_per_cell: usize,
}

/// The detector: configuration plus named parameters.
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    layers: Layers,
    /// Number of backbone feature extractions performed, across scenes and
    /// targets. Lets callers demonstrate feature sharing/caching.
    extractions: AtomicU64,
}

/// Tensor shapes of every layer, in parameter insertion order.
fn layer_plan(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut plan = Vec::new();
    let mut c_in = 3;
    for (i, &c_out) in config.backbone_channels.iter().enumerate() {
        plan.push((format!("backbone.{i}.weight"), vec![c_out, c_in, 3, 3]));
        plan.push((format!("backbone.{i}.bias"), vec![c_out]));
        c_in = c_out;
    }
    let n = config.feature_dim;
    let t = config.num_target_views;
    if config.has(EmbedFeature::Cc) {
        plan.push(("embed.cc.weight".into(), vec![n / 2, t * n, 3, 3]));
        plan.push(("embed.cc.bias".into(), vec![n / 2]));
    }
    if config.has(EmbedFeature::Diff) {
        plan.push(("embed.diff.weight".into(), vec![n / 2, t * n, 3, 3]));
        plan.push(("embed.diff.bias".into(), vec![n / 2]));
    }
    plan.push((
        "embed.fuse.weight".into(),
        vec![n, config.fusion_input_channels(), 3, 3],
    ));
    plan.push(("embed.fuse.bias".into(), vec![n]));
    let a = config.anchors_per_cell();
    plan.push(("head.cls.weight".into(), vec![2 * a, n, 1, 1]));
    plan.push(("head.cls.bias".into(), vec![2 * a]));
    plan.push(("head.reg.weight".into(), vec![4 * a, n, 1, 1]));
    plan.push(("head.reg.bias".into(), vec![4 * a]));
    plan
}

/// Initial foreground logit of the classification head. `σ(-4) ≈ 0.018`,
/// i.e. a freshly initialized model calls ~2% of anchors foreground.
const FG_PRIOR_LOGIT: f64 = -4.0;

impl<T: Scalar> Model<T> {
    /// Build a model with uniform Glorot weights, `b = sqrt(6 / (fan_in +
    /// fan_out))` with fans counting the full receptive field, and zero
    /// biases — except the foreground classification biases, which start
    /// at [`FG_PRIOR_LOGIT`]. Draws happen in f64 in a fixed order, so a
    /// seed pins every parameter bit regardless of the value type.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model<T>> {
        config.validate()?;
        let mut rng = SplitMix64::substream(seed, 0x696e6974);
        let mut params = ParamStore::new();
        for (name, shape) in layer_plan(&config) {
            let tensor = if shape.len() == 4 {
                let fan_in = shape[1] * shape[2] * shape[3];
                let fan_out = shape[0] * shape[2] * shape[3];
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| T::from_f64(rng.range_f64(-limit, limit)))
                    .collect();
                Tensor::new(shape, data)?
            } else {
                Tensor::zeros(shape)
            };
            params.insert(&name, tensor)?;
        }
        // Start the classifier near "everything is background" (foreground
        // probability ≈ 2%). Almost all anchors are negative, so this puts
        // easy negatives at near-zero loss immediately and lets the scarce
        // positive (and hard-negative) gradients dominate from step one.
        let cls_bias = params.id("head.cls.bias").expect("planned layer");
        for slot in 0..config.anchors_per_cell() {
            params.value_mut(cls_bias).data_mut()[2 * slot + 1] = T::from_f64(FG_PRIOR_LOGIT);
        }
        Ok(Model::assemble(config, params))
    }

    fn assemble(config: ModelConfig, params: ParamStore<T>) -> Model<T> {
        let layer = |name: &str| ConvLayer {
            weight: params.id(&format!("{name}.weight")).expect("planned layer"),
            bias: params.id(&format!("{name}.bias")).expect("planned layer"),
        };
        let layers = Layers {
            backbone: (0..config.backbone_channels.len())
                .map(|i| layer(&format!("backbone.{i}")))
                .collect(),
            cc: config.has(EmbedFeature::Cc).then(|| layer("embed.cc")),
            diff: config.has(EmbedFeature::Diff).then(|| layer("embed.diff")),
            fuse: layer("embed.fuse"),
            cls: layer("head.cls"),
            reg: layer("head.reg"),
        };
        Model {
            config,
            params,
            layers,
            extractions: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Backbone executions so far (scene and target images both count).
    pub fn extraction_count(&self) -> u64 {
        self.extractions.load(Ordering::Relaxed)
    }

    pub fn reset_extraction_count(&self) {
        self.extractions.store(0, Ordering::Relaxed);
    }

    /// Start recording a forward pass. Trainable sessions bind parameters
    /// as gradient-carrying leaves; frozen sessions bind them as constants,
    /// skipping all backward bookkeeping.
    pub fn session(&self, trainable: bool) -> Session<'_, T> {
        Session {
            model: self,
            graph: Graph::new(),
            bindings: Vec::new(),
            bound: HashMap::new(),
            trainable,
        }
    }

    /// Route gradients gathered from a finished session into the store.
    pub fn apply_grads(&mut self, grads: Vec<(ParamId, Vec<T>)>) -> Result<()> {
        for (id, g) in grads {
            self.params.add_grad(id, &g)?;
        }
        Ok(())
    }

    pub fn sgd_step(&mut self, sgd: &Sgd) -> Result<()> {
        sgd.step(&mut self.params)
    }
}

impl Model<f32> {
    /// Write all parameters to the binary checkpoint container.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, self.params.iter())
    }

    /// Rebuild a model from a config and checkpoint. Every parameter the
    /// config implies must be present with the right shape, and no extras
    /// are allowed.
    pub fn load(config: ModelConfig, path: &Path) -> Result<Model<f32>> {
        config.validate()?;
        let mut params: ParamStore<f32> = ParamStore::new();
        for (name, shape) in layer_plan(&config) {
            params.insert(&name, Tensor::zeros(shape))?;
        }
        let mut seen = vec![false; params.len()];
        for (name, tensor) in checkpoint::read(path)? {
            let id = params.id(&name).ok_or_else(|| {
                Error::config(format!("checkpoint has unknown parameter {name:?}"))
            })?;
            params.set_value(id, tensor)?;
            seen[params.ids().position(|i| i == id).expect("valid id")] = true;
        }
        if let Some(missing) = params
            .ids()
            .zip(&seen)
            .find_map(|(id, &s)| (!s).then(|| params.name(id).to_string()))
        {
            return Err(Error::config(format!(
                "checkpoint is missing parameter {missing:?}"
            )));
        }
        Ok(Model::assemble(config, params))
    }
}

/// One recorded forward pass over a model's graph.
pub struct Session<'m, T: Scalar> {
    model: &'m Model<T>,
    pub graph: Graph<T>,
    bindings: Vec<(ParamId, Var)>,
    bound: HashMap<ParamId, Var>,
    trainable: bool,
}

impl<'m, T: Scalar> Session<'m, T> {
    fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = self.model.params.value(id).clone();
        let var = if self.trainable {
            let v = self.graph.leaf(value);
            self.bindings.push((id, v));
            v
        } else {
            self.graph.constant(value)
        };
        self.bound.insert(id, var);
        var
    }

    fn conv(&mut self, x: Var, layer: ConvLayer, stride: usize, padding: usize) -> Result<Var> {
        let w = self.param(layer.weight);
        let b = self.param(layer.bias);
        self.graph.conv2d(x, w, b, stride, padding)
    }

    /// Run the backbone on an RGB image: per block a 3x3 same-padding conv
    /// and ReLU, with a 2x2 max pool in the leading blocks until the
    /// configured stride is reached.
    pub fn extract_features(&mut self, image: &Tensor<T>) -> Result<Var> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 input channels, got {c}")));
        }
        let stride = self.model.config.backbone_stride;
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::shape(format!(
                "image extent {h}x{w} not divisible by backbone stride {stride}"
            )));
        }
        self.model.extractions.fetch_add(1, Ordering::Relaxed);
        let num_pools = self.model.config.num_pools();
        let mut x = self.graph.constant(image.clone());
        for (i, layer) in self.model.layers.backbone.clone().iter().enumerate() {
            x = self.conv(x, *layer, 1, 1)?;
            x = self.graph.relu(x);
            if i < num_pools {
                x = self.graph.maxpool2x2(x)?;
            }
        }
        Ok(x)
    }

    /// Condition scene features on the target views. Per view the target
    /// features are pooled to `N x 1 x 1`; the CC branch cross-correlates
    /// the scene map with the pooled vector (or an `N x k x k` adaptive
    /// pooling when `cc_kernel = k > 1`), the DIFF branch subtracts it
    /// everywhere. Each branch concatenates its T view maps and reduces
    /// them with a 3x3 conv to N/2 channels; enabled branch outputs (IMG =
    /// raw scene map first, then CC, then DIFF) fuse through a final 3x3
    /// conv back to N channels. Every embedding conv is followed by ReLU.
    pub fn embed(&mut self, scene_feat: Var, target_feats: &[Var]) -> Result<Var> {
        let cfg = &self.model.config;
        let t = cfg.num_target_views;
        if target_feats.len() != t {
            return Err(Error::config(format!(
                "model expects {t} target views, got {}",
                target_feats.len()
            )));
        }
        let n = cfg.feature_dim;
        for &v in std::iter::once(&scene_feat).chain(target_feats) {
            let (_, c, _, _) = self.graph.value(v).dims4()?;
            if c != n {
                return Err(Error::shape(format!(
                    "feature maps must have {n} channels, got {c}"
                )));
            }
        }

        let k = cfg.cc_kernel;
        let needs_pooled =
            self.model.layers.diff.is_some() || (self.model.layers.cc.is_some() && k == 1);
        let mut pooled = Vec::with_capacity(t);
        if needs_pooled {
            for &tf in target_feats {
                pooled.push(self.graph.global_max_pool(tf)?);
            }
        }

        let mut branches = Vec::new();
        if cfg.has(EmbedFeature::Img) {
            branches.push(scene_feat);
        }
        if let Some(cc_layer) = self.model.layers.cc {
            let mut maps = Vec::with_capacity(t);
            for (ti, &tf) in target_feats.iter().enumerate() {
                let kernel4 = if k == 1 {
                    pooled[ti]
                } else {
                    self.graph.adaptive_max_pool(tf, k, k)?
                };
                let kernel = self.graph.reshape(kernel4, vec![n, k, k])?;
                maps.push(self.graph.depthwise_xcorr(scene_feat, kernel)?);
            }
            let cat = self.graph.concat_channels(&maps)?;
            let reduced = self.conv(cat, cc_layer, 1, 1)?;
            branches.push(self.graph.relu(reduced));
        }
        if let Some(diff_layer) = self.model.layers.diff {
            let mut maps = Vec::with_capacity(t);
            for &p in &pooled {
                maps.push(self.graph.broadcast_sub(scene_feat, p)?);
            }
            let cat = self.graph.concat_channels(&maps)?;
            let reduced = self.conv(cat, diff_layer, 1, 1)?;
            branches.push(self.graph.relu(reduced));
        }
        let fused_in = self.graph.concat_channels(&branches)?;
        let fused = self.conv(fused_in, self.model.layers.fuse, 1, 1)?;
        Ok(self.graph.relu(fused))
    }

    /// Apply the 1x1 classification and regression convs.
    pub fn head(&mut self, embedded: Var) -> Result<HeadOutput> {
        let (_, _, hf, wf) = self.graph.value(embedded).dims4()?;
        let cls_logits = self.conv(embedded, self.model.layers.cls, 1, 0)?;
        let reg_deltas = self.conv(embedded, self.model.layers.reg, 1, 0)?;
        Ok(HeadOutput {
            cls_logits,
            reg_deltas,
            feature_stride: self.model.config.backbone_stride,
            hf,
            wf,
            anchors_per_cell: self.model.config.anchors_per_cell(),
        })
    }

    /// Full pass: backbone on scene and every target view, embedding, head.
    pub fn forward(&mut self, scene: &Tensor<T>, targets: &[Tensor<T>]) -> Result<HeadOutput> {
        let scene_feat = self.extract_features(scene)?;
        let target_feats = targets
            .iter()
            .map(|img| self.extract_features(img))
            .collect::<Result<Vec<_>>>()?;
        let embedded = self.embed(scene_feat, &target_feats)?;
        self.head(embedded)
    }

    /// Collect parameter gradients after a backward pass, consuming the
    /// session. Pair with [`Model::apply_grads`]. Every bound parameter is
    /// reported: a leaf the backward pass never reached (e.g. the box
    /// regression head when an example has no positive anchors) has an
    /// exactly-zero gradient, returned as explicit zeros so the optimizer
    /// can stay strict about unbound parameters.
    pub fn into_grads(self) -> Vec<(ParamId, Vec<T>)> {
        self.bindings
            .iter()
            .map(|&(id, var)| {
                let g = match self.graph.grad(var) {
                    Some(g) => g.to_vec(),
                    None => vec![T::zero(); self.graph.value(var).numel()],
                };
                (id, g)
            })
            .collect()
    }
}
