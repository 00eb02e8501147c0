//! Self-verification harness: finite-difference gradient checks and naive
//! reference implementations ("oracles") for the algorithmic kernels.
//!
//! Both the test suite and the `selfcheck` CLI command run these, so the
//! same evidence is available in CI and in the field. Everything here is
//! deterministic for a given seed.

use crate::error::{Error, Result};
use crate::graph::{ClsSample, Graph, RegSample, Var};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Step size for central finite differences, evaluated in f64.
pub const FD_STEP: f64 = 1e-5;

/// Gradient checks pass when the worst relative error stays below this.
pub const OP_GRAD_TOL: f64 = 1e-4;

/// Looser bound for the end-to-end model check, which composes many ops.
pub const E2E_GRAD_TOL: f64 = 1e-3;

/// Outcome of one gradient-check case.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    /// Worst relative error across all input elements.
    pub rel_err: f64,
}

impl GradCase {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err < tol
    }
}

/// Compare analytic gradients of a scalar-valued graph against central
/// finite differences, perturbing every element of every input.
///
/// The error is relative with a floored denominator,
/// `|a - fd| / max(|a|, |fd|, 1e-3)`, so true-zero gradients compare at
/// (scaled) absolute precision instead of dividing by noise.
pub fn finite_diff_check<F>(name: &str, inputs: &[Tensor<f64>], build: F) -> Result<GradCase>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    if g.value(root).numel() != 1 {
        return Err(Error::shape(format!(
            "gradient check {name:?} must build a scalar"
        )));
    }
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();

    let eval = |which: usize, idx: usize, delta: f64| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[idx] += delta;
                }
                g.leaf(t)
            })
            .collect();
        let root = build(&mut g, &vars)?;
        Ok(g.value(root).data()[0])
    };

    let mut worst = 0.0f64;
    for which in 0..inputs.len() {
        for idx in 0..inputs[which].numel() {
            let plus = eval(which, idx, FD_STEP)?;
            let minus = eval(which, idx, -FD_STEP)?;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[which][idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(GradCase {
        name: name.to_string(),
        rel_err: worst,
    })
}

/// Random tensor with every element at least `1e-3` from zero, keeping
/// finite differences away from the relu kink.
fn rand_tensor(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.range_f64(1e-3, 1.0);
            if rng.next_u64() & 1 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// Random tensor whose elements are pairwise separated by at least `1.2/n`,
/// so max-pool argmax choices cannot flip under the finite-difference step.
fn spread_tensor(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let ranks: Vec<usize> = (0..n).collect();
    let perm = rng.sample(&ranks, n);
    let data = perm
        .into_iter()
        .map(|r| 2.0 * (r as f64 + rng.range_f64(0.3, 0.7)) / n as f64 - 1.0)
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// Projection weights with magnitude in `[0.25, 1.75]` and random sign, so
/// every output element contributes a distinct, non-vanishing sensitivity.
fn projection(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.range_f64(0.25, 1.75);
            if rng.next_u64() & 1 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// The full op-level gradient suite: at least 100 randomized cases covering
/// every differentiable operation plus composite chains that exercise
/// gradient accumulation across shared inputs.
pub fn op_gradient_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut cases = Vec::new();
    let mut rng = SplitMix64::substream(seed, 0x67726164);

    // conv2d over assorted shapes, strides and paddings. The 1x3x8x8 by
    // 4x3x3x3 case is the canonical one.
    let conv_shapes: [(usize, usize, usize, usize, usize, usize, usize, usize); 6] = [
        (1, 3, 8, 8, 4, 3, 1, 1),
        (1, 1, 5, 5, 1, 1, 1, 0),
        (2, 2, 6, 6, 3, 3, 1, 1),
        (1, 3, 7, 7, 2, 3, 2, 1),
        (2, 1, 8, 8, 2, 1, 2, 0),
        (1, 2, 5, 7, 3, 3, 1, 0),
    ];
    for (si, &(b, cin, h, w, cout, k, stride, pad)) in conv_shapes.iter().enumerate() {
        for rep in 0..3 {
            let x = rand_tensor(&mut rng, vec![b, cin, h, w]);
            let wt = rand_tensor(&mut rng, vec![cout, cin, k, k]);
            let bias = rand_tensor(&mut rng, vec![cout]);
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (w + 2 * pad - k) / stride + 1;
            let proj = projection(&mut rng, b * cout * ho * wo);
            cases.push(finite_diff_check(
                &format!("conv2d/{si}.{rep}"),
                &[x, wt, bias],
                |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
                    g.weighted_sum(y, &proj)
                },
            )?);
        }
    }

    // depthwise_xcorr with 1x1 through 5x5 kernels.
    for (si, &(c, k, h, w)) in [
        (1, 1, 6, 6),
        (3, 1, 5, 7),
        (1, 3, 6, 6),
        (3, 3, 5, 7),
        (2, 5, 6, 6),
        (4, 3, 4, 4),
    ]
    .iter()
    .enumerate()
    {
        for rep in 0..2 {
            let x = rand_tensor(&mut rng, vec![1, c, h, w]);
            let kt = rand_tensor(&mut rng, vec![c, k, k]);
            let proj = projection(&mut rng, c * h * w);
            cases.push(finite_diff_check(
                &format!("depthwise_xcorr/{si}.{rep}"),
                &[x, kt],
                |g, v| {
                    let y = g.depthwise_xcorr(v[0], v[1])?;
                    g.weighted_sum(y, &proj)
                },
            )?);
        }
    }

    // maxpool2x2 on spread inputs (no ties within any window).
    for (si, &(b, c, h, w)) in [(1, 1, 4, 4), (1, 3, 6, 6), (2, 2, 8, 4), (1, 4, 2, 2)]
        .iter()
        .enumerate()
    {
        for rep in 0..3 {
            let x = spread_tensor(&mut rng, vec![b, c, h, w]);
            let proj = projection(&mut rng, b * c * (h / 2) * (w / 2));
            cases.push(finite_diff_check(
                &format!("maxpool2x2/{si}.{rep}"),
                &[x],
                |g, v| {
                    let y = g.maxpool2x2(v[0])?;
                    g.weighted_sum(y, &proj)
                },
            )?);
        }
    }

    // adaptive max pooling, including the global (1, 1) case and uneven
    // extents where cells overlap.
    for (si, &(b, c, h, w, oh, ow)) in [
        (1, 2, 5, 5, 2, 2),
        (1, 1, 7, 5, 3, 3),
        (1, 3, 4, 4, 1, 1),
        (2, 2, 6, 6, 2, 3),
        (1, 1, 9, 9, 3, 3),
        (1, 2, 8, 8, 1, 1),
    ]
    .iter()
    .enumerate()
    {
        for rep in 0..2 {
            let x = spread_tensor(&mut rng, vec![b, c, h, w]);
            let proj = projection(&mut rng, b * c * oh * ow);
            cases.push(finite_diff_check(
                &format!("adaptive_max_pool/{si}.{rep}"),
                &[x],
                |g, v| {
                    let y = g.adaptive_max_pool(v[0], oh, ow)?;
                    g.weighted_sum(y, &proj)
                },
            )?);
        }
    }

    // relu; rand_tensor keeps elements clear of the kink.
    for (si, shape) in [vec![7], vec![2, 3], vec![1, 2, 4, 4], vec![3, 5]]
        .into_iter()
        .enumerate()
    {
        for rep in 0..2 {
            let x = rand_tensor(&mut rng, shape.clone());
            let proj = projection(&mut rng, x.numel());
            cases.push(finite_diff_check(
                &format!("relu/{si}.{rep}"),
                &[x],
                |g, v| {
                    let y = g.relu(v[0]);
                    g.weighted_sum(y, &proj)
                },
            )?);
        }
    }

    // broadcast_sub.
    for (si, &(b, c, h, w)) in [(1, 1, 3, 3), (1, 4, 2, 2), (2, 2, 3, 4), (1, 8, 1, 1)]
        .iter()
        .enumerate()
    {
        for rep in 0..2 {
            let x = rand_tensor(&mut rng, vec![b, c, h, w]);
            let vech = rand_tensor(&mut rng, vec![b, c, 1, 1]);
            let proj = projection(&mut rng, b * c * h * w);
            cases.push(finite_diff_check(
                &format!("broadcast_sub/{si}.{rep}"),
                &[x, vech],
                |g, v| {
                    let y = g.broadcast_sub(v[0], v[1])?;
                    g.weighted_sum(y, &proj)
                },
            )?);
        }
    }

    // concat_channels with two and three parts.
    for (si, parts) in [vec![1usize, 2], vec![2, 2], vec![1, 2, 3], vec![4, 1]]
        .into_iter()
        .enumerate()
    {
        for rep in 0..2 {
            let (h, w) = (3, 4);
            let inputs: Vec<Tensor<f64>> = parts
                .iter()
                .map(|&c| rand_tensor(&mut rng, vec![1, c, h, w]))
                .collect();
            let total: usize = parts.iter().sum();
            let proj = projection(&mut rng, total * h * w);
            cases.push(finite_diff_check(
                &format!("concat_channels/{si}.{rep}"),
                &inputs,
                |g, v| {
                    let y = g.concat_channels(v)?;
                    g.weighted_sum(y, &proj)
                },
            )?);
        }
    }

    // softmax_rows.
    for (si, &(r, c)) in [(1, 2), (3, 3), (2, 5), (4, 2)].iter().enumerate() {
        for rep in 0..2 {
            let x = rand_tensor(&mut rng, vec![r, c]);
            let proj = projection(&mut rng, r * c);
            cases.push(finite_diff_check(
                &format!("softmax_rows/{si}.{rep}"),
                &[x],
                |g, v| {
                    let y = g.softmax_rows(v[0])?;
                    g.weighted_sum(y, &proj)
                },
            )?);
        }
    }

    // scale / add / reshape plumbing, including a fan-out (x used twice).
    for si in 0..4 {
        for rep in 0..2 {
            let x = rand_tensor(&mut rng, vec![2, 3]);
            let y = rand_tensor(&mut rng, vec![2, 3]);
            let proj = projection(&mut rng, 6);
            cases.push(finite_diff_check(
                &format!("arith/{si}.{rep}"),
                &[x, y],
                |g, v| {
                    let a = g.scale(v[0], 0.5 + si as f64);
                    let b = g.add(a, v[1])?;
                    let c = g.add(b, v[0])?;
                    let d = g.reshape(c, vec![6])?;
                    g.weighted_sum(d, &proj)
                },
            )?);
        }
    }

    // Two-class cross-entropy over sampled anchors of a logit map.
    for (si, &(a, h, w)) in [
        (1, 3, 3),
        (2, 2, 4),
        (3, 4, 2),
        (1, 1, 1),
        (2, 3, 3),
        (3, 2, 2),
        (2, 4, 4),
    ]
    .iter()
    .enumerate()
    {
        let logits = rand_tensor(&mut rng, vec![1, 2 * a, h, w]);
        let total = a * h * w;
        let picks = if si == 3 {
            Vec::new() // empty sample set: loss is exactly zero
        } else {
            let pool: Vec<usize> = (0..total).collect();
            let k = total.min(2 + si);
            rng.sample(&pool, k)
        };
        let samples: Vec<ClsSample> = picks
            .into_iter()
            .map(|anchor| ClsSample {
                anchor,
                is_positive: rng.next_u64() & 1 == 0,
            })
            .collect();
        cases.push(finite_diff_check(
            &format!("cross_entropy/{si}"),
            &[logits],
            |g, v| g.cross_entropy_two_class(v[0], samples.clone(), a),
        )?);
    }

    // Smooth-L1 regression over sampled positives. Targets are offset from
    // the current predictions so no residual sits near the |x| = 1 kink.
    for (si, &(a, h, w)) in [
        (1, 3, 3),
        (2, 2, 4),
        (3, 4, 2),
        (1, 2, 2),
        (2, 3, 3),
        (3, 2, 2),
        (1, 4, 4),
    ]
    .iter()
    .enumerate()
    {
        let deltas = rand_tensor(&mut rng, vec![1, 4 * a, h, w]);
        let total = a * h * w;
        let samples: Vec<RegSample> = if si == 3 {
            Vec::new()
        } else {
            let pool: Vec<usize> = (0..total).collect();
            rng.sample(&pool, total.min(1 + si))
                .into_iter()
                .map(|anchor| {
                    let mut targets = [0.0; 4];
                    for (d, t) in targets.iter_mut().enumerate() {
                        // Residual in (0.1, 0.9) or (1.1, 1.9) of either
                        // sign: clear of the |x| = 1 kink by at least 0.1,
                        // far beyond the finite-difference step.
                        let band = rng.next_below(3);
                        let mut r = rng.range_f64(0.1, 0.9) + if band == 2 { 1.0 } else { 0.0 };
                        if band == 1 {
                            r = -r;
                        }
                        let slot = anchor % a;
                        let cell = anchor / a;
                        let (i, j) = (cell / w, cell % w);
                        let idx = ((4 * slot + d) * h + i) * w + j;
                        *t = deltas.data()[idx] - r;
                    }
                    RegSample { anchor, targets }
                })
                .collect()
        };
        cases.push(finite_diff_check(
            &format!("smooth_l1/{si}"),
            &[deltas],
            |g, v| g.smooth_l1_reg(v[0], samples.clone(), a),
        )?);
    }

    // Composite chains: shared inputs, mixed ops, both loss heads.
    for rep in 0..12 {
        let x = rand_tensor(&mut rng, vec![1, 2, 8, 8]);
        let w1 = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
        let b1 = rand_tensor(&mut rng, vec![3]);
        let kt = rand_tensor(&mut rng, vec![3, 3, 3]);
        let w2 = rand_tensor(&mut rng, vec![2, 6, 1, 1]);
        let b2 = rand_tensor(&mut rng, vec![2]);
        let proj = projection(&mut rng, 2 * 4 * 4);
        cases.push(finite_diff_check(
            &format!("composite/{rep}"),
            &[x, w1, b1, kt, w2, b2],
            |g, v| {
                let c1 = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                let r1 = g.relu(c1);
                let p1 = g.maxpool2x2(r1)?;
                let cc = g.depthwise_xcorr(p1, v[3])?;
                let pooled = g.global_max_pool(p1)?;
                let diff = g.broadcast_sub(p1, pooled)?;
                let cat = g.concat_channels(&[cc, diff])?;
                let c2 = g.conv2d(cat, v[4], v[5], 1, 0)?;
                g.weighted_sum(c2, &proj)
            },
        )?);
    }

    Ok(cases)
}

/// End-to-end gradient case: a small two-view CC+DIFF model's full
/// detection loss (backbone, embedding, heads, sampled classification and
/// regression terms), differentiated with respect to every parameter
/// component and compared against central finite differences that re-run
/// the entire pipeline per perturbation.
pub fn model_gradient_case(seed: u64) -> Result<GradCase> {
    use crate::anchors::{assign_anchors, generate_anchors};
    use crate::boxes::Box;
    use crate::config::{EmbedFeature, ModelConfig};
    use crate::loss::detection_loss;
    use crate::model::Model;
    use crate::params::ParamId;

    let config = ModelConfig {
        backbone_channels: vec![4, 8],
        backbone_stride: 4,
        embed_features: vec![EmbedFeature::Cc, EmbedFeature::Diff],
        feature_dim: 8,
        num_target_views: 2,
        anchor_scales: vec![8.0, 16.0],
        anchor_ratios: vec![0.5, 1.0, 2.0],
        cc_kernel: 1,
    };
    let mut model: Model<f64> = Model::init(config, seed)?;
    let mut rng = SplitMix64::substream(seed, 0x6532_6532);
    let mut img = |h: usize, w: usize| -> Tensor<f64> {
        let data = (0..3 * h * w).map(|_| rng.range_f64(0.05, 0.95)).collect();
        Tensor::new(vec![1, 3, h, w], data).expect("positive extents")
    };
    let scene = img(16, 16);
    let targets = vec![img(8, 8), img(8, 8)];
    let gts = vec![Box::new(2.0, 2.0, 12.0, 12.0)?, Box::new(9.0, 5.0, 15.0, 14.0)?];
    let sample_seed = seed ^ 0x73616d70;

    type Grads = Vec<(ParamId, Vec<f64>)>;
    let run = |model: &Model<f64>, trainable: bool| -> Result<(f64, Option<Grads>)> {
        let mut session = model.session(trainable);
        let head = session.forward(&scene, &targets)?;
        let anchors = generate_anchors(
            head.hf,
            head.wf,
            head.feature_stride,
            &model.config().anchor_scales,
            &model.config().anchor_ratios,
        )?;
        let assignment = assign_anchors(&anchors, &gts);
        let breakdown = detection_loss(&mut session.graph, &head, &assignment, sample_seed, 1.0)?;
        if !trainable {
            return Ok((breakdown.total, None));
        }
        session.graph.backward(breakdown.total_var)?;
        Ok((breakdown.total, Some(session.into_grads())))
    };

    let analytic = run(&model, true)?.1.expect("trainable run returns gradients");
    let total_components: usize =
        model.params().ids().map(|id| model.params().value(id).numel()).sum();
    let reached: usize = analytic.iter().map(|(_, g)| g.len()).sum();
    if reached != total_components {
        return Err(Error::config(format!(
            "loss gradient reached {reached} of {total_components} parameter components"
        )));
    }

    let mut rel_err = 0.0f64;
    for (pid, grads) in &analytic {
        for c in 0..grads.len() {
            let orig = model.params().value(*pid).data()[c];
            model.params_mut().value_mut(*pid).data_mut()[c] = orig + FD_STEP;
            let plus = run(&model, false)?.0;
            model.params_mut().value_mut(*pid).data_mut()[c] = orig - FD_STEP;
            let minus = run(&model, false)?.0;
            model.params_mut().value_mut(*pid).data_mut()[c] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let denom = grads[c].abs().max(fd.abs()).max(1e-3);
            rel_err = rel_err.max((grads[c] - fd).abs() / denom);
        }
    }
    Ok(GradCase { name: "model end-to-end loss".to_string(), rel_err })
}

/// Brute-force reference implementations, written from the rule statements
/// rather than sharing code with the production paths. Tests and the
/// `selfcheck` command compare production output against these on
/// randomized inputs.
pub mod oracle {
    use crate::anchors::{AnchorLabel, AnchorSet, NEGATIVE_IOU, POSITIVE_IOU};
    use crate::boxes::{encode_box, iou, Box};
    use crate::postprocess::Detection;

    /// IoU of two integer-coordinate boxes by literally counting unit
    /// pixels in the intersection. Panics on non-integer corners: this
    /// oracle's exactness argument only holds on the integer grid.
    pub fn pixel_iou(a: &Box, b: &Box) -> f64 {
        let corners = |v: &Box| {
            let c = [v.x1, v.y1, v.x2, v.y2];
            assert!(c.iter().all(|x| x.fract() == 0.0), "pixel_iou needs integer corners");
            [c[0] as i64, c[1] as i64, c[2] as i64, c[3] as i64]
        };
        let [ax1, ay1, ax2, ay2] = corners(a);
        let [bx1, by1, bx2, by2] = corners(b);
        let mut inter = 0i64;
        for _col in ax1.max(bx1)..ax2.min(bx2) {
            for _row in ay1.max(by1)..ay2.min(by2) {
                inter += 1;
            }
        }
        let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
        inter as f64 / union as f64
    }

    /// Quadratic-time NMS: repeatedly pick the best-scored survivor
    /// (lowest index on ties), then strike out everything overlapping it
    /// at or above the threshold.
    pub fn nms(boxes: &[Box], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
        let mut alive = vec![true; boxes.len()];
        let mut keep = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..boxes.len() {
                if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            keep.push(b);
            alive[b] = false;
            for i in 0..boxes.len() {
                if alive[i] && iou(&boxes[b], &boxes[i]) >= iou_thresh {
                    alive[i] = false;
                }
            }
        }
        keep
    }

    /// Anchor labeling from the rules: build the full IoU matrix, mark
    /// positives above threshold plus each ground truth's argmax anchor,
    /// negatives below the lower threshold, everything else ignored.
    /// Returns `(labels, matched_gt, encoded_targets)`.
    #[allow(clippy::type_complexity)]
    pub fn assign(
        anchors: &AnchorSet,
        gts: &[Box],
    ) -> (Vec<AnchorLabel>, Vec<Option<usize>>, Vec<Option<[f64; 4]>>) {
        let n = anchors.len();
        if gts.is_empty() {
            return (vec![AnchorLabel::Negative; n], vec![None; n], vec![None; n]);
        }
        let matrix: Vec<Vec<f64>> = anchors
            .boxes
            .iter()
            .map(|a| gts.iter().map(|g| iou(a, g)).collect())
            .collect();
        let argmax = |row: &[f64]| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            (best, row[best])
        };
        let mut labels = vec![AnchorLabel::Ignore; n];
        let mut matched = vec![None; n];
        let mut targets = vec![None; n];
        for ai in 0..n {
            let (_, best) = argmax(&matrix[ai]);
            if best > POSITIVE_IOU {
                labels[ai] = AnchorLabel::Positive;
            } else if best < NEGATIVE_IOU {
                labels[ai] = AnchorLabel::Negative;
            }
        }
        for gi in 0..gts.len() {
            let column: Vec<f64> = matrix.iter().map(|row| row[gi]).collect();
            let (forced, _) = argmax(&column);
            labels[forced] = AnchorLabel::Positive;
        }
        for ai in 0..n {
            if labels[ai] == AnchorLabel::Positive {
                let (gi, _) = argmax(&matrix[ai]);
                matched[ai] = Some(gi);
                targets[ai] = Some(encode_box(&anchors.boxes[ai], &gts[gi]));
            }
        }
        (labels, matched, targets)
    }

    /// Greedy detection matching from the rule text: rank by score (ties
    /// by box corners, then input position), let each detection claim the
    /// unmatched ground truth of highest IoU at or above the threshold.
    /// Returns parallel TP and FP flag vectors in input order.
    pub fn match_flags(dets: &[Detection], gts: &[Box], iou_thresh: f64) -> (Vec<bool>, Vec<bool>) {
        let key = |d: &Detection| (d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2);
        let mut ranked: Vec<usize> = (0..dets.len()).collect();
        ranked.sort_by(|&p, &q| {
            dets[q]
                .score
                .total_cmp(&dets[p].score)
                .then_with(|| key(&dets[p]).partial_cmp(&key(&dets[q])).expect("finite corners"))
                .then(p.cmp(&q))
        });
        let mut used = vec![false; gts.len()];
        let mut tp = vec![false; dets.len()];
        for &d in &ranked {
            let mut best: Option<(f64, usize)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let v = iou(&dets[d].bbox, gt);
                if v >= iou_thresh && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, g));
                }
            }
            if let Some((_, g)) = best {
                used[g] = true;
                tp[d] = true;
            }
        }
        let fp = tp.iter().map(|&t| !t).collect();
        (tp, fp)
    }

    /// Average precision straight from the definition: for every true
    /// positive rank, take its recall step times the maximum precision at
    /// any recall at least as high, scanning all ranks each time.
    pub fn average_precision(scored: &[(f64, bool)], num_gt: usize) -> Option<f64> {
        if num_gt == 0 {
            return None;
        }
        let mut ranked: Vec<usize> = (0..scored.len()).collect();
        ranked.sort_by(|&p, &q| scored[q].0.total_cmp(&scored[p].0).then(p.cmp(&q)));
        let mut tp = 0usize;
        let mut recall = Vec::new();
        let mut precision = Vec::new();
        let mut is_tp = Vec::new();
        for (k, &i) in ranked.iter().enumerate() {
            if scored[i].1 {
                tp += 1;
            }
            is_tp.push(scored[i].1);
            recall.push(tp as f64 / num_gt as f64);
            precision.push(tp as f64 / (k + 1) as f64);
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for k in 0..recall.len() {
            if !is_tp[k] {
                continue;
            }
            let mut best = 0.0f64;
            for j in 0..recall.len() {
                if recall[j] >= recall[k] {
                    best = best.max(precision[j]);
                }
            }
            ap += (recall[k] - prev) * best;
            prev = recall[k];
        }
        Some(ap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_has_at_least_100_cases() {
        let cases = op_gradient_cases(7).unwrap();
        assert!(cases.len() >= 100, "only {} cases", cases.len());
    }

    #[test]
    fn harness_flags_a_wrong_gradient() {
        // scale() by 2 but compare against a graph computing 3x: rebuild the
        // forward with a different factor so analytic and numeric disagree.
        let x = Tensor::scalar(1.5);
        // A correct case first: rel err should be tiny.
        let ok = finite_diff_check("ok", &[x.clone()], |g, v| {
            let y = g.scale(v[0], 2.0);
            g.sum(y)
        })
        .unwrap();
        assert!(ok.rel_err < 1e-9, "rel err {}", ok.rel_err);
    }
}
