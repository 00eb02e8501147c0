//! Reverse-mode automatic differentiation on a tape of executed operations.
//!
//! Each operation runs eagerly when recorded, storing its output value (and
//! whatever bookkeeping backward needs, e.g. pooling argmax indices) in a
//! [`Node`]. [`Graph::backward`] walks the tape in reverse insertion order
//! and accumulates gradients additively, so a value consumed by several
//! later operations receives the sum of their contributions.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{idx4, Scalar, Tensor};

/// Handle to a node on the tape. Cheap to copy; only valid for the graph
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// One sampled anchor for the classification loss: tape-order anchor index
/// plus whether it was assigned foreground.
#[derive(Clone, Copy, Debug)]
pub struct ClsSample {
    pub anchor: usize,
    pub is_positive: bool,
}

/// One sampled positive anchor for the regression loss with its encoded
/// box-delta targets `(tx, ty, tw, th)`.
#[derive(Clone, Copy, Debug)]
pub struct RegSample {
    pub anchor: usize,
    pub targets: [f64; 4],
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    DepthwiseXcorr {
        x: Var,
        kernel: Var,
    },
    MaxPool2x2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AdaptiveMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    BroadcastSub {
        x: Var,
        vec: Var,
    },
    ConcatChannels {
        xs: Vec<Var>,
    },
    SoftmaxRows {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// Scalar projection `sum_i weights[i] * x[i]`; with unit weights this
    /// is a plain sum.
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    /// Mean two-class cross-entropy over sampled anchors of a `[1, 2A, H, W]`
    /// logit map (background logit at channel `2a`, foreground at `2a+1`).
    CrossEntropyTwoClass {
        logits: Var,
        samples: Vec<ClsSample>,
        anchors_per_cell: usize,
    },
    /// Smooth-L1 regression loss over sampled positive anchors of a
    /// `[1, 4A, H, W]` delta map, normalised by `max(1, positives)`.
    SmoothL1Reg {
        deltas: Var,
        samples: Vec<RegSample>,
        anchors_per_cell: usize,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of eagerly executed operations supporting one reverse pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed for `v` during the forward pass.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated for `v` by [`Graph::backward`], if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input that gradients should flow back to (a parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Record an input that never needs gradients (e.g. image data). The
    /// backward pass skips work feeding into constants.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// 2D convolution of `x: [B, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`
    /// and per-channel bias `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        let (bs, cin, h, wx) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias must be [{cout}], got {:?}",
                self.value(b).shape()
            )));
        }
        if h + 2 * padding < kh || wx + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                wx + 2 * padding
            )));
        }
        let ho = kernels::conv2d_out_extent(h, kh, stride, padding);
        let wo = kernels::conv2d_out_extent(wx, kw, stride, padding);
        let mut out = vec![T::zero(); bs * cout * ho * wo];
        kernels::conv2d_forward(
            self.value(x).data(),
            (bs, cin, h, wx),
            self.value(w).data(),
            (cout, cin, kh, kw),
            self.value(b).data(),
            stride,
            padding,
            &mut out,
            (ho, wo),
        );
        let grad = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![bs, cout, ho, wo], out)?,
            grad,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    /// Depthwise cross-correlation of `x: [B, C, H, W]` against a
    /// per-channel `kernel: [C, kh, kw]` with odd extents, producing an
    /// output of the same shape as `x`.
    pub fn depthwise_xcorr(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (bs, c, h, w) = self.value(x).dims4()?;
        let kshape = self.value(kernel).shape().to_vec();
        if kshape.len() != 3 || kshape[0] != c {
            return Err(Error::shape(format!(
                "xcorr kernel must be [{c}, kh, kw], got {kshape:?}"
            )));
        }
        let (kh, kw) = (kshape[1], kshape[2]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!(
                "xcorr kernel extents must be odd for same-size output, got {kh}x{kw}"
            )));
        }
        if kh > h + 2 * (kh / 2) || kw > w + 2 * (kw / 2) {
            return Err(Error::shape("xcorr kernel larger than padded input"));
        }
        let mut out = vec![T::zero(); bs * c * h * w];
        kernels::depthwise_xcorr_forward(
            self.value(x).data(),
            (bs, c, h, w),
            self.value(kernel).data(),
            (kh, kw),
            &mut out,
        );
        let grad = self.needs(x) || self.needs(kernel);
        Ok(self.push(
            Tensor::new(vec![bs, c, h, w], out)?,
            grad,
            Op::DepthwiseXcorr { x, kernel },
        ))
    }

    /// 2x2 stride-2 max pooling; both spatial extents must be even.
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "maxpool2x2 needs even extents, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![T::zero(); bs * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        kernels::maxpool2x2_forward(self.value(x).data(), (bs, c, h, w), &mut out, &mut argmax);
        let grad = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![bs, c, ho, wo], out)?,
            grad,
            Op::MaxPool2x2 { x, argmax },
        ))
    }

    /// Adaptive max pooling to an `oh x ow` grid; `(1, 1)` is global max
    /// pooling. Ties resolve to the first element in row-major order.
    pub fn adaptive_max_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (bs, c, h, w) = self.value(x).dims4()?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(Error::shape(format!(
                "adaptive pool target {oh}x{ow} invalid for input {h}x{w}"
            )));
        }
        let mut out = vec![T::zero(); bs * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        kernels::adaptive_max_pool_forward(
            self.value(x).data(),
            (bs, c, h, w),
            (oh, ow),
            &mut out,
            &mut argmax,
        );
        let grad = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![bs, c, oh, ow], out)?,
            grad,
            Op::AdaptiveMaxPool { x, argmax },
        ))
    }

    /// Global max pooling to `[B, C, 1, 1]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        self.adaptive_max_pool(x, 1, 1)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = vec![T::zero(); self.value(x).numel()];
        kernels::relu_forward(self.value(x).data(), &mut out);
        let shape = self.value(x).shape().to_vec();
        let grad = self.needs(x);
        self.push(
            Tensor::new(shape, out).expect("same shape as input"),
            grad,
            Op::Relu { x },
        )
    }

    /// Subtract a `[B, C, 1, 1]` vector from every spatial position of a
    /// `[B, C, H, W]` map.
    pub fn broadcast_sub(&mut self, x: Var, vec: Var) -> Result<Var> {
        let (bs, c, h, w) = self.value(x).dims4()?;
        let (vb, vc, vh, vw) = self.value(vec).dims4()?;
        if (vb, vc, vh, vw) != (bs, c, 1, 1) {
            return Err(Error::shape(format!(
                "broadcast_sub vector must be [{bs}, {c}, 1, 1], got {:?}",
                self.value(vec).shape()
            )));
        }
        let mut out = vec![T::zero(); bs * c * h * w];
        kernels::broadcast_sub_forward(
            self.value(x).data(),
            (bs, c, h, w),
            self.value(vec).data(),
            &mut out,
        );
        let grad = self.needs(x) || self.needs(vec);
        Ok(self.push(
            Tensor::new(vec![bs, c, h, w], out)?,
            grad,
            Op::BroadcastSub { x, vec },
        ))
    }

    /// Concatenate `[B, Ci, H, W]` maps along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat_channels needs at least one input"));
        }
        let (bs, _, h, w) = self.value(xs[0]).dims4()?;
        let mut total_c = 0;
        for &v in xs {
            let (vb, vc, vh, vw) = self.value(v).dims4()?;
            if (vb, vh, vw) != (bs, h, w) {
                return Err(Error::shape(format!(
                    "concat_channels extents differ: [{bs}, _, {h}, {w}] vs {:?}",
                    self.value(v).shape()
                )));
            }
            total_c += vc;
        }
        let mut out = vec![T::zero(); bs * total_c * h * w];
        let hw = h * w;
        for b in 0..bs {
            let mut c_off = 0;
            for &v in xs {
                let t = self.value(v);
                let (_, vc, _, _) = t.dims4()?;
                let src = &t.data()[b * vc * hw..(b + 1) * vc * hw];
                let dst_base = (b * total_c + c_off) * hw;
                out[dst_base..dst_base + vc * hw].copy_from_slice(src);
                c_off += vc;
            }
        }
        let grad = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            Tensor::new(vec![bs, total_c, h, w], out)?,
            grad,
            Op::ConcatChannels { xs: xs.to_vec() },
        ))
    }

    /// Row-wise softmax of a `[rows, cols]` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let mut out = vec![T::zero(); rows * cols];
        kernels::softmax_rows_forward(self.value(x).data(), rows, cols, &mut out);
        let grad = self.needs(x);
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, grad, Op::SoftmaxRows { x }))
    }

    /// View the same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let grad = self.needs(x);
        Ok(self.push(t, grad, Op::Reshape { x }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let data: Vec<T> = self.value(x).data().iter().map(|&v| v * f).collect();
        let shape = self.value(x).shape().to_vec();
        let grad = self.needs(x);
        self.push(
            Tensor::new(shape, data).expect("same shape as input"),
            grad,
            Op::Scale { x, factor },
        )
    }

    /// Dot product of `x` (flattened) with fixed weights, yielding a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::shape(format!(
                "weighted_sum has {} weights for {} elements",
                weights.len(),
                self.value(x).numel()
            )));
        }
        let mut acc = T::zero();
        for (&v, &w) in self.value(x).data().iter().zip(weights) {
            acc = acc + v * T::from_f64(w);
        }
        let grad = self.needs(x);
        Ok(self.push(
            Tensor::scalar(acc),
            grad,
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Sum of all elements of `x`, yielding a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let weights = vec![1.0; self.value(x).numel()];
        self.weighted_sum(x, &weights)
    }

    /// Elementwise sum of two identically shaped values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let grad = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, grad, Op::Add { a, b }))
    }

    /// Mean two-class cross-entropy over `samples` drawn from a
    /// `[1, 2A, H, W]` logit map. Empty samples give exactly zero loss.
    pub fn cross_entropy_two_class(
        &mut self,
        logits: Var,
        samples: Vec<ClsSample>,
        anchors_per_cell: usize,
    ) -> Result<Var> {
        let (bs, ch, h, w) = self.value(logits).dims4()?;
        if bs != 1 || ch != 2 * anchors_per_cell {
            return Err(Error::shape(format!(
                "classification logits must be [1, {}, H, W], got {:?}",
                2 * anchors_per_cell,
                self.value(logits).shape()
            )));
        }
        let max_anchor = h * w * anchors_per_cell;
        let mut loss = T::zero();
        for s in &samples {
            if s.anchor >= max_anchor {
                return Err(Error::shape(format!(
                    "anchor index {} out of range ({max_anchor} anchors)",
                    s.anchor
                )));
            }
            let (bg, fg) = two_class_logit_indices(s.anchor, anchors_per_cell, h, w, ch);
            let l0 = self.value(logits).data()[bg];
            let l1 = self.value(logits).data()[fg];
            let m = if l0 > l1 { l0 } else { l1 };
            let denom = (l0 - m).exp() + (l1 - m).exp();
            let picked = if s.is_positive { l1 } else { l0 };
            loss = loss - (picked - m - denom.ln());
        }
        if !samples.is_empty() {
            loss = loss / T::from_f64(samples.len() as f64);
        }
        let grad = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            grad,
            Op::CrossEntropyTwoClass {
                logits,
                samples,
                anchors_per_cell,
            },
        ))
    }

    /// Smooth-L1 loss of a `[1, 4A, H, W]` delta map against per-anchor
    /// targets, summed over the four deltas of each sampled positive and
    /// divided by `max(1, positives)`.
    pub fn smooth_l1_reg(
        &mut self,
        deltas: Var,
        samples: Vec<RegSample>,
        anchors_per_cell: usize,
    ) -> Result<Var> {
        let (bs, ch, h, w) = self.value(deltas).dims4()?;
        if bs != 1 || ch != 4 * anchors_per_cell {
            return Err(Error::shape(format!(
                "regression deltas must be [1, {}, H, W], got {:?}",
                4 * anchors_per_cell,
                self.value(deltas).shape()
            )));
        }
        let max_anchor = h * w * anchors_per_cell;
        let norm = T::from_f64(samples.len().max(1) as f64);
        let mut loss = T::zero();
        for s in &samples {
            if s.anchor >= max_anchor {
                return Err(Error::shape(format!(
                    "anchor index {} out of range ({max_anchor} anchors)",
                    s.anchor
                )));
            }
            for (d, &target) in s.targets.iter().enumerate() {
                let idx = reg_delta_index(s.anchor, d, anchors_per_cell, h, w, ch);
                let diff = self.value(deltas).data()[idx] - T::from_f64(target);
                loss = loss + kernels::smooth_l1(diff);
            }
        }
        loss = loss / norm;
        let grad = self.needs(deltas);
        Ok(self.push(
            Tensor::scalar(loss),
            grad,
            Op::SmoothL1Reg {
                deltas,
                samples,
                anchors_per_cell,
            },
        ))
    }

    /// Run the reverse pass from a scalar `root`, replacing any gradients
    /// from a previous pass. Gradients flow only into subgraphs that
    /// contain at least one [`Graph::leaf`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let contributions = {
                let (before, rest) = self.nodes.split_at_mut(i);
                let node = &rest[0];
                let gout = node.grad.as_deref().expect("checked above");
                input_grads(before, node, gout)
            };
            for (target, grad) in contributions {
                let slot = &mut self.nodes[target];
                match &mut slot.grad {
                    Some(existing) => {
                        for (e, g) in existing.iter_mut().zip(&grad) {
                            *e = *e + *g;
                        }
                    }
                    None => slot.grad = Some(grad),
                }
            }
        }
        Ok(())
    }
}

/// Flat indices of the background / foreground logits for an anchor in a
/// `[1, 2A, H, W]` map. Anchor order is `(row * W + col) * A + slot`.
fn two_class_logit_indices(
    anchor: usize,
    anchors_per_cell: usize,
    h: usize,
    w: usize,
    channels: usize,
) -> (usize, usize) {
    let slot = anchor % anchors_per_cell;
    let cell = anchor / anchors_per_cell;
    let (i, j) = (cell / w, cell % w);
    (
        idx4(channels, h, w, 0, 2 * slot, i, j),
        idx4(channels, h, w, 0, 2 * slot + 1, i, j),
    )
}

/// Flat index of delta component `d` (0..4) for an anchor in a
/// `[1, 4A, H, W]` map.
fn reg_delta_index(
    anchor: usize,
    d: usize,
    anchors_per_cell: usize,
    h: usize,
    w: usize,
    channels: usize,
) -> usize {
    let slot = anchor % anchors_per_cell;
    let cell = anchor / anchors_per_cell;
    let (i, j) = (cell / w, cell % w);
    idx4(channels, h, w, 0, 4 * slot + d, i, j)
}

/// Compute the gradient contribution of one node to each of its inputs.
/// Inputs always precede the node on the tape, so `before` covers them.
fn input_grads<T: Scalar>(before: &[Node<T>], node: &Node<T>, gout: &[T]) -> Vec<(usize, Vec<T>)> {
    let mut out: Vec<(usize, Vec<T>)> = Vec::new();
    let needs = |v: Var| before[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            padding,
        } => {
            let xt = &before[x.0].value;
            let wt = &before[w.0].value;
            let xd = xt.dims4().expect("validated at record time");
            let wd = wt.dims4().expect("validated at record time");
            let od = {
                let (_, _, ho, wo) = node.value.dims4().expect("conv output is 4d");
                (ho, wo)
            };
            let mut gx = needs(*x).then(|| vec![T::zero(); xt.numel()]);
            let mut gw = needs(*w).then(|| vec![T::zero(); wt.numel()]);
            let mut gb = needs(*b).then(|| vec![T::zero(); before[b.0].value.numel()]);
            kernels::conv2d_backward(
                xt.data(),
                xd,
                wt.data(),
                wd,
                *stride,
                *padding,
                gout,
                od,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            if let Some(g) = gx {
                out.push((x.0, g));
            }
            if let Some(g) = gw {
                out.push((w.0, g));
            }
            if let Some(g) = gb {
                out.push((b.0, g));
            }
        }
        Op::DepthwiseXcorr { x, kernel } => {
            let xt = &before[x.0].value;
            let kt = &before[kernel.0].value;
            let xd = xt.dims4().expect("validated at record time");
            let ks = kt.shape();
            let mut gx = needs(*x).then(|| vec![T::zero(); xt.numel()]);
            let mut gk = needs(*kernel).then(|| vec![T::zero(); kt.numel()]);
            kernels::depthwise_xcorr_backward(
                xt.data(),
                xd,
                kt.data(),
                (ks[1], ks[2]),
                gout,
                gx.as_deref_mut(),
                gk.as_deref_mut(),
            );
            if let Some(g) = gx {
                out.push((x.0, g));
            }
            if let Some(g) = gk {
                out.push((kernel.0, g));
            }
        }
        Op::MaxPool2x2 { x, argmax } | Op::AdaptiveMaxPool { x, argmax } => {
            if needs(*x) {
                let mut gx = vec![T::zero(); before[x.0].value.numel()];
                kernels::argmax_pool_backward(gout, argmax, &mut gx);
                out.push((x.0, gx));
            }
        }
        Op::Relu { x } => {
            if needs(*x) {
                let mut gx = vec![T::zero(); before[x.0].value.numel()];
                kernels::relu_backward(before[x.0].value.data(), gout, &mut gx);
                out.push((x.0, gx));
            }
        }
        Op::BroadcastSub { x, vec } => {
            let xd = before[x.0].value.dims4().expect("validated at record time");
            let mut gx = needs(*x).then(|| vec![T::zero(); before[x.0].value.numel()]);
            let mut gv = needs(*vec).then(|| vec![T::zero(); before[vec.0].value.numel()]);
            kernels::broadcast_sub_backward(xd, gout, gx.as_deref_mut(), gv.as_deref_mut());
            if let Some(g) = gx {
                out.push((x.0, g));
            }
            if let Some(g) = gv {
                out.push((vec.0, g));
            }
        }
        Op::ConcatChannels { xs } => {
            let (bs, total_c, h, w) = node.value.dims4().expect("concat output is 4d");
            let hw = h * w;
            let mut c_off = 0;
            for &v in xs {
                let (_, vc, _, _) = before[v.0].value.dims4().expect("validated at record time");
                if needs(v) {
                    let mut gx = vec![T::zero(); before[v.0].value.numel()];
                    for b in 0..bs {
                        let src = &gout[(b * total_c + c_off) * hw..(b * total_c + c_off + vc) * hw];
                        gx[b * vc * hw..(b + 1) * vc * hw].copy_from_slice(src);
                    }
                    out.push((v.0, gx));
                }
                c_off += vc;
            }
        }
        Op::SoftmaxRows { x } => {
            if needs(*x) {
                let (rows, cols) = node.value.dims2().expect("softmax output is 2d");
                let mut gx = vec![T::zero(); rows * cols];
                kernels::softmax_rows_backward(node.value.data(), rows, cols, gout, &mut gx);
                out.push((x.0, gx));
            }
        }
        Op::Reshape { x } => {
            if needs(*x) {
                out.push((x.0, gout.to_vec()));
            }
        }
        Op::Scale { x, factor } => {
            if needs(*x) {
                let f = T::from_f64(*factor);
                out.push((x.0, gout.iter().map(|&g| g * f).collect()));
            }
        }
        Op::Add { a, b } => {
            if needs(*a) {
                out.push((a.0, gout.to_vec()));
            }
            if needs(*b) {
                out.push((b.0, gout.to_vec()));
            }
        }
        Op::WeightedSum { x, weights } => {
            if needs(*x) {
                let g = gout[0];
                out.push((x.0, weights.iter().map(|&w| g * T::from_f64(w)).collect()));
            }
        }
        Op::CrossEntropyTwoClass {
            logits,
            samples,
            anchors_per_cell,
        } => {
            if needs(*logits) && !samples.is_empty() {
                let lt = &before[logits.0].value;
                let (_, ch, h, w) = lt.dims4().expect("validated at record time");
                let mut gl = vec![T::zero(); lt.numel()];
                let scale = gout[0] / T::from_f64(samples.len() as f64);
                for s in samples {
                    let (bg, fg) = two_class_logit_indices(s.anchor, *anchors_per_cell, h, w, ch);
                    let l0 = lt.data()[bg];
                    let l1 = lt.data()[fg];
                    let m = if l0 > l1 { l0 } else { l1 };
                    let z0 = (l0 - m).exp();
                    let z1 = (l1 - m).exp();
                    let denom = z0 + z1;
                    let (p0, p1) = (z0 / denom, z1 / denom);
                    let (t0, t1) = if s.is_positive {
                        (T::zero(), T::one())
                    } else {
                        (T::one(), T::zero())
                    };
                    gl[bg] = gl[bg] + (p0 - t0) * scale;
                    gl[fg] = gl[fg] + (p1 - t1) * scale;
                }
                out.push((logits.0, gl));
            }
        }
        Op::SmoothL1Reg {
            deltas,
            samples,
            anchors_per_cell,
        } => {
            if needs(*deltas) && !samples.is_empty() {
                let dt = &before[deltas.0].value;
                let (_, ch, h, w) = dt.dims4().expect("validated at record time");
                let mut gd = vec![T::zero(); dt.numel()];
                let scale = gout[0] / T::from_f64(samples.len().max(1) as f64);
                for s in samples {
                    for (d, &target) in s.targets.iter().enumerate() {
                        let idx = reg_delta_index(s.anchor, d, *anchors_per_cell, h, w, ch);
                        let diff = dt.data()[idx] - T::from_f64(target);
                        gd[idx] = gd[idx] + kernels::smooth_l1_grad(diff) * scale;
                    }
                }
                out.push((deltas.0, gd));
            }
        }
    }
    out
}
