//! Scalar compute kernels behind the graph operations.
//!
//! Every kernel accumulates each output element in a fixed loop order, so
//! results are bitwise reproducible across runs. Backward kernels add into
//! the provided gradient buffers.

use crate::tensor::Scalar;

/// Output index range `[lo, hi)` such that `o*stride + k_off - padding`
/// stays inside `[0, in_len)`.
#[inline]
pub fn out_range(
    in_len: usize,
    out_len: usize,
    stride: usize,
    padding: usize,
    k_off: usize,
) -> (usize, usize) {
    let lo = if padding > k_off {
        (padding - k_off).div_ceil(stride)
    } else {
        0
    };
    let top = in_len + padding;
    if top <= k_off {
        return (0, 0);
    }
    let hi = ((top - k_off - 1) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub fn conv2d_out_extent(in_len: usize, k: usize, stride: usize, padding: usize) -> usize {
    (in_len + 2 * padding - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    (bs, cin, h, w): (usize, usize, usize, usize),
    wgt: &[T],
    (cout, _, kh, kw): (usize, usize, usize, usize),
    bias: &[T],
    stride: usize,
    padding: usize,
    out: &mut [T],
    (ho, wo): (usize, usize),
) {
    for b in 0..bs {
        for co in 0..cout {
            let ob = (b * cout + co) * ho * wo;
            out[ob..ob + ho * wo].fill(bias[co]);
            for ci in 0..cin {
                let xb = (b * cin + ci) * h * w;
                for u in 0..kh {
                    let (oh_lo, oh_hi) = out_range(h, ho, stride, padding, u);
                    for v in 0..kw {
                        let (ow_lo, ow_hi) = out_range(w, wo, stride, padding, v);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let wv = wgt[((co * cin + ci) * kh + u) * kw + v];
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + u - padding;
                            let xrow = &x[xb + ih * w..xb + (ih + 1) * w];
                            let orow = &mut out[ob + oh * wo..ob + (oh + 1) * wo];
                            if stride == 1 {
                                let iw0 = ow_lo + v - padding;
                                let n = ow_hi - ow_lo;
                                let xs = &xrow[iw0..iw0 + n];
                                let os = &mut orow[ow_lo..ow_lo + n];
                                for i in 0..n {
                                    os[i] = os[i] + wv * xs[i];
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    orow[ow] = orow[ow] + wv * xrow[ow * stride + v - padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of `conv2d_forward` w.r.t. input, weight and bias. Any
/// combination may be requested; each buffer is accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    (bs, cin, h, w): (usize, usize, usize, usize),
    wgt: &[T],
    (cout, _, kh, kw): (usize, usize, usize, usize),
    stride: usize,
    padding: usize,
    gout: &[T],
    (ho, wo): (usize, usize),
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    if let Some(gb) = gb {
        for b in 0..bs {
            for co in 0..cout {
                let ob = (b * cout + co) * ho * wo;
                let mut acc = T::zero();
                for &g in &gout[ob..ob + ho * wo] {
                    acc = acc + g;
                }
                gb[co] = gb[co] + acc;
            }
        }
    }
    if let Some(gw) = gw.as_deref_mut() {
        for co in 0..cout {
            for ci in 0..cin {
                for u in 0..kh {
                    let (oh_lo, oh_hi) = out_range(h, ho, stride, padding, u);
                    for v in 0..kw {
                        let (ow_lo, ow_hi) = out_range(w, wo, stride, padding, v);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for b in 0..bs {
                            let xb = (b * cin + ci) * h * w;
                            let ob = (b * cout + co) * ho * wo;
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + u - padding;
                                let xrow = &x[xb + ih * w..xb + (ih + 1) * w];
                                let grow = &gout[ob + oh * wo..ob + (oh + 1) * wo];
                                if stride == 1 {
                                    let iw0 = ow_lo + v - padding;
                                    let n = ow_hi - ow_lo;
                                    let xs = &xrow[iw0..iw0 + n];
                                    let gs = &grow[ow_lo..ow_lo + n];
                                    for i in 0..n {
                                        acc = acc + xs[i] * gs[i];
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        acc = acc + xrow[ow * stride + v - padding] * grow[ow];
                                    }
                                }
                            }
                        }
                        let wi = ((co * cin + ci) * kh + u) * kw + v;
                        gw[wi] = gw[wi] + acc;
                    }
                }
            }
        }
    }
    if let Some(gx) = gx.as_deref_mut() {
        for b in 0..bs {
            for co in 0..cout {
                let ob = (b * cout + co) * ho * wo;
                for ci in 0..cin {
                    let xb = (b * cin + ci) * h * w;
                    for u in 0..kh {
                        let (oh_lo, oh_hi) = out_range(h, ho, stride, padding, u);
                        for v in 0..kw {
                            let (ow_lo, ow_hi) = out_range(w, wo, stride, padding, v);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let wv = wgt[((co * cin + ci) * kh + u) * kw + v];
                            for oh in oh_lo..oh_hi {
                                let ih = oh * stride + u - padding;
                                let grow = &gout[ob + oh * wo..ob + (oh + 1) * wo];
                                let xrow = &mut gx[xb + ih * w..xb + (ih + 1) * w];
                                if stride == 1 {
                                    let iw0 = ow_lo + v - padding;
                                    let n = ow_hi - ow_lo;
                                    let gs = &grow[ow_lo..ow_lo + n];
                                    let xs = &mut xrow[iw0..iw0 + n];
                                    for i in 0..n {
                                        xs[i] = xs[i] + wv * gs[i];
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ow * stride + v - padding;
                                        xrow[iw] = xrow[iw] + wv * grow[ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise cross-correlation: each channel of `x` is correlated with the
/// matching channel of `kernel` ([C, kh, kw]), output padded to the input
/// extent with `(kh/2, kw/2)`.
pub fn depthwise_xcorr_forward<T: Scalar>(
    x: &[T],
    (bs, c, h, w): (usize, usize, usize, usize),
    kernel: &[T],
    (kh, kw): (usize, usize),
    out: &mut [T],
) {
    let (ph, pw) = (kh / 2, kw / 2);
    out.fill(T::zero());
    for b in 0..bs {
        for ci in 0..c {
            let xb = (b * c + ci) * h * w;
            for u in 0..kh {
                let (oh_lo, oh_hi) = out_range(h, h, 1, ph, u);
                for v in 0..kw {
                    let (ow_lo, ow_hi) = out_range(w, w, 1, pw, v);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let kv = kernel[(ci * kh + u) * kw + v];
                    for oh in oh_lo..oh_hi {
                        let ih = oh + u - ph;
                        let iw0 = ow_lo + v - pw;
                        let n = ow_hi - ow_lo;
                        let xs = &x[xb + ih * w + iw0..xb + ih * w + iw0 + n];
                        let os = &mut out[xb + oh * w + ow_lo..xb + oh * w + ow_lo + n];
                        for i in 0..n {
                            os[i] = os[i] + kv * xs[i];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_xcorr_backward<T: Scalar>(
    x: &[T],
    (bs, c, h, w): (usize, usize, usize, usize),
    kernel: &[T],
    (kh, kw): (usize, usize),
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gk: Option<&mut [T]>,
) {
    let (ph, pw) = (kh / 2, kw / 2);
    if let Some(gk) = gk.as_deref_mut() {
        for ci in 0..c {
            for u in 0..kh {
                let (oh_lo, oh_hi) = out_range(h, h, 1, ph, u);
                for v in 0..kw {
                    let (ow_lo, ow_hi) = out_range(w, w, 1, pw, v);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for b in 0..bs {
                        let xb = (b * c + ci) * h * w;
                        for oh in oh_lo..oh_hi {
                            let ih = oh + u - ph;
                            let iw0 = ow_lo + v - pw;
                            let n = ow_hi - ow_lo;
                            let xs = &x[xb + ih * w + iw0..xb + ih * w + iw0 + n];
                            let gs = &gout[xb + oh * w + ow_lo..xb + oh * w + ow_lo + n];
                            for i in 0..n {
                                acc = acc + xs[i] * gs[i];
                            }
                        }
                    }
                    let ki = (ci * kh + u) * kw + v;
                    gk[ki] = gk[ki] + acc;
                }
            }
        }
    }
    if let Some(gx) = gx.as_deref_mut() {
        for b in 0..bs {
            for ci in 0..c {
                let xb = (b * c + ci) * h * w;
                for u in 0..kh {
                    let (oh_lo, oh_hi) = out_range(h, h, 1, ph, u);
                    for v in 0..kw {
                        let (ow_lo, ow_hi) = out_range(w, w, 1, pw, v);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let kv = kernel[(ci * kh + u) * kw + v];
                        for oh in oh_lo..oh_hi {
                            let ih = oh + u - ph;
                            let iw0 = ow_lo + v - pw;
                            let n = ow_hi - ow_lo;
                            let gs = &gout[xb + oh * w + ow_lo..xb + oh * w + ow_lo + n];
                            let xs = &mut gx[xb + ih * w + iw0..xb + ih * w + iw0 + n];
                            for i in 0..n {
                                xs[i] = xs[i] + kv * gs[i];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pool; `argmax` records the winning input index per
/// output element, first in row-major order on ties.
pub fn maxpool2x2_forward<T: Scalar>(
    x: &[T],
    (bs, c, h, w): (usize, usize, usize, usize),
    out: &mut [T],
    argmax: &mut [usize],
) {
    let (ho, wo) = (h / 2, w / 2);
    for b in 0..bs {
        for ci in 0..c {
            let xb = (b * c + ci) * h * w;
            let ob = (b * c + ci) * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let base = xb + (oh * 2) * w + ow * 2;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if x[cand] > x[best] {
                            best = cand;
                        }
                    }
                    out[ob + oh * wo + ow] = x[best];
                    argmax[ob + oh * wo + ow] = best;
                }
            }
        }
    }
}

/// Max pool over an adaptive grid (PyTorch-style cell boundaries
/// `floor(i*H/oh) .. ceil((i+1)*H/oh)`). `(1, 1)` output is global max
/// pooling. Ties resolve to the first index in row-major order.
pub fn adaptive_max_pool_forward<T: Scalar>(
    x: &[T],
    (bs, c, h, w): (usize, usize, usize, usize),
    (oh_n, ow_n): (usize, usize),
    out: &mut [T],
    argmax: &mut [usize],
) {
    for b in 0..bs {
        for ci in 0..c {
            let xb = (b * c + ci) * h * w;
            let ob = (b * c + ci) * oh_n * ow_n;
            for i in 0..oh_n {
                let r0 = i * h / oh_n;
                let r1 = ((i + 1) * h).div_ceil(oh_n);
                for j in 0..ow_n {
                    let c0 = j * w / ow_n;
                    let c1 = ((j + 1) * w).div_ceil(ow_n);
                    let mut best = xb + r0 * w + c0;
                    for r in r0..r1 {
                        for cc in c0..c1 {
                            let idx = xb + r * w + cc;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out[ob + i * ow_n + j] = x[best];
                    argmax[ob + i * ow_n + j] = best;
                }
            }
        }
    }
}

pub fn argmax_pool_backward<T: Scalar>(gout: &[T], argmax: &[usize], gx: &mut [T]) {
    for (g, &idx) in gout.iter().zip(argmax) {
        gx[idx] = gx[idx] + *g;
    }
}

pub fn relu_forward<T: Scalar>(x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > T::zero() { v } else { T::zero() };
    }
}

pub fn relu_backward<T: Scalar>(x: &[T], gout: &[T], gx: &mut [T]) {
    for i in 0..x.len() {
        if x[i] > T::zero() {
            gx[i] = gx[i] + gout[i];
        }
    }
}

/// `out[b,c,h,w] = x[b,c,h,w] - vec[b,c,0,0]`.
pub fn broadcast_sub_forward<T: Scalar>(
    x: &[T],
    (bs, c, h, w): (usize, usize, usize, usize),
    vec: &[T],
    out: &mut [T],
) {
    let hw = h * w;
    for bc in 0..bs * c {
        let v = vec[bc];
        let base = bc * hw;
        for i in 0..hw {
            out[base + i] = x[base + i] - v;
        }
    }
}

pub fn broadcast_sub_backward<T: Scalar>(
    (bs, c, h, w): (usize, usize, usize, usize),
    gout: &[T],
    gx: Option<&mut [T]>,
    gvec: Option<&mut [T]>,
) {
    let hw = h * w;
    if let Some(gx) = gx {
        for i in 0..gout.len() {
            gx[i] = gx[i] + gout[i];
        }
    }
    if let Some(gvec) = gvec {
        for bc in 0..bs * c {
            let mut acc = T::zero();
            for &g in &gout[bc * hw..(bc + 1) * hw] {
                acc = acc + g;
            }
            gvec[bc] = gvec[bc] - acc;
        }
    }
}

/// Row-wise softmax of a `[rows, cols]` matrix.
pub fn softmax_rows_forward<T: Scalar>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m {
                m = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - m).exp();
            sum = sum + *o;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o = *o / sum;
        }
    }
}

pub fn softmax_rows_backward<T: Scalar>(
    y: &[T],
    rows: usize,
    cols: usize,
    gout: &[T],
    gx: &mut [T],
) {
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let gr = &gout[r * cols..(r + 1) * cols];
        let mut dot = T::zero();
        for i in 0..cols {
            dot = dot + yr[i] * gr[i];
        }
        let gxr = &mut gx[r * cols..(r + 1) * cols];
        for i in 0..cols {
            gxr[i] = gxr[i] + yr[i] * (gr[i] - dot);
        }
    }
}

/// Huber-style smooth L1: `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`.
pub fn smooth_l1<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    if x.abs() < T::one() {
        half * x * x
    } else {
        x.abs() - half
    }
}

/// Derivative of [`smooth_l1`]: `x` inside the quadratic zone, `sign(x)` outside.
pub fn smooth_l1_grad<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else if x > T::zero() {
        T::one()
    } else {
        -T::one()
    }
}
