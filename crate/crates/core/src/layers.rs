//! Forward and backward kernels for every layer kind used by the networks.
//!
//! All kernels are pure functions of their inputs (plus an explicit RNG for
//! dropout) and are generic over [`Scalar`] so the same code runs in `f32`
//! for training and `f64` for gradient checking. Batch loops run in a fixed
//! sequential order, so accumulated gradients are reproducible bit for bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How a convolution's bias is shared across spatial positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMode {
    /// One bias per output map.
    Tied,
    /// One bias per output map and output location.
    Untied,
}

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Gradients of a 3×3 convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// Gradients of a fully connected layer.
#[derive(Debug, Clone)]
pub struct FcGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// Expected bias length of a conv layer with `out_maps` maps producing `oh`×`ow` outputs.
pub fn conv_bias_len(mode: BiasMode, out_maps: usize, oh: usize, ow: usize) -> usize {
    match mode {
        BiasMode::Tied => out_maps,
        BiasMode::Untied => out_maps * oh * ow,
    }
}

fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    mode: BiasMode,
) -> Result<(usize, usize)> {
    input.require_nonempty("conv3x3")?;
    let [_, c, h, w] = input.shape();
    let [o, wc, kh, kw] = weights.shape();
    if kh != KERNEL || kw != KERNEL || wc != c || o == 0 {
        return Err(Error::shape(
            "conv3x3",
            format!("weights [out, {c}, 3, 3] for input {:?}", input.shape()),
            format!("weights {:?}", weights.shape()),
        ));
    }
    if h < KERNEL || w < KERNEL {
        return Err(Error::shape(
            "conv3x3",
            "input height and width >= 3",
            format!("{:?}", input.shape()),
        ));
    }
    let (oh, ow) = (h - 2, w - 2);
    let want = conv_bias_len(mode, o, oh, ow);
    if bias.len() != want {
        return Err(Error::shape(
            "conv3x3 bias",
            format!("{want} ({mode:?})"),
            bias.len(),
        ));
    }
    Ok((oh, ow))
}

// Unfolds one (c,h,w) item into a (c·9) × (oh·ow) patch matrix.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let (oh, ow) = (h - 2, w - 2);
    let p = oh * ow;
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * TAPS + ky * KERNEL + kx) * p;
                for y in 0..oh {
                    let src = ci * h * w + (y + ky) * w + kx;
                    let dst = row + y * ow;
                    col[dst..dst + ow].copy_from_slice(&x[src..src + ow]);
                }
            }
        }
    }
}

// Adjoint of `im2col`: scatters patch gradients back onto the item.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, gx: &mut [T]) {
    let (oh, ow) = (h - 2, w - 2);
    let p = oh * ow;
    for ci in 0..c {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * TAPS + ky * KERNEL + kx) * p;
                for y in 0..oh {
                    let dst = ci * h * w + (y + ky) * w + kx;
                    let src = row + y * ow;
                    for (g, &v) in gx[dst..dst + ow].iter_mut().zip(&col[src..src + ow]) {
                        *g = *g + v;
                    }
                }
            }
        }
    }
}

/// Valid 3×3 cross-correlation with stride 1.
///
/// `weights` has shape `[out_maps, in_maps, 3, 3]`; `bias` holds `out_maps`
/// values when tied or `out_maps·(H−2)·(W−2)` values when untied.
pub fn conv3x3_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    mode: BiasMode,
) -> Result<Tensor<T>> {
    let (oh, ow) = check_conv(input, weights, bias, mode)?;
    let [n, c, h, w] = input.shape();
    let o = weights.shape()[0];
    let p = oh * ow;
    let mut out = Tensor::zeros([n, o, oh, ow]);
    let mut col = vec![T::zero(); c * TAPS * p];
    for i in 0..n {
        im2col(input.item(i), c, h, w, &mut col);
        let y = out.item_mut(i);
        T::gemm(o, c * TAPS, p, weights.data(), false, &col, false, y, false);
        match mode {
            BiasMode::Untied => {
                for (v, &b) in y.iter_mut().zip(bias) {
                    *v = *v + b;
                }
            }
            BiasMode::Tied => {
                for (m, &b) in bias.iter().enumerate() {
                    for v in &mut y[m * p..(m + 1) * p] {
                        *v = *v + b;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of [`conv3x3_forward`].
pub fn conv3x3_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    mode: BiasMode,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (gi, gw, gb) = conv3x3_backward_impl(input, weights, bias, mode, grad_out, true)?;
    Ok(ConvGrads {
        input: gi.expect("input gradient requested"),
        weights: gw,
        bias: gb,
    })
}

/// Backward pass that can skip the input gradient when nothing upstream needs it.
pub(crate) fn conv3x3_backward_impl<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    mode: BiasMode,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Vec<T>)> {
    let (oh, ow) = check_conv(input, weights, bias, mode)?;
    let [n, c, h, w] = input.shape();
    let o = weights.shape()[0];
    if grad_out.shape() != [n, o, oh, ow] {
        return Err(Error::shape(
            "conv3x3 backward",
            format!("{:?}", [n, o, oh, ow]),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let p = oh * ow;
    let ck = c * TAPS;
    let mut gw = Tensor::zeros(weights.shape());
    let mut gb = vec![T::zero(); bias.len()];
    let mut gi = if need_input {
        Some(Tensor::zeros(input.shape()))
    } else {
        None
    };
    let mut col = vec![T::zero(); ck * p];
    let mut gcol = if need_input {
        vec![T::zero(); ck * p]
    } else {
        Vec::new()
    };
    for i in 0..n {
        let g = grad_out.item(i);
        im2col(input.item(i), c, h, w, &mut col);
        // dW += dY · colᵀ
        T::gemm(o, p, ck, g, false, &col, true, gw.data_mut(), true);
        match mode {
            BiasMode::Untied => {
                for (b, &v) in gb.iter_mut().zip(g) {
                    *b = *b + v;
                }
            }
            BiasMode::Tied => {
                for (m, b) in gb.iter_mut().enumerate() {
                    *b = *b + g[m * p..(m + 1) * p].iter().copied().sum::<T>();
                }
            }
        }
        if let Some(gi) = gi.as_mut() {
            // dcol = Wᵀ · dY
            T::gemm(ck, o, p, weights.data(), true, g, false, &mut gcol, false);
            col2im(&gcol, c, h, w, gi.item_mut(i));
        }
    }
    Ok((gi, gw, gb))
}

/// Output extent of a ceil-mode 2×2 pool.
pub fn pooled(extent: usize) -> usize {
    extent.div_ceil(2)
}

/// Non-overlapping 2×2 max pooling in ceil mode.
///
/// Partial windows at the bottom/right edges pool over the available elements.
/// Returns the pooled tensor and, per output element, the linear index of the
/// selected input element; ties resolve to the smallest index.
pub fn maxpool2x2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    input.require_nonempty("maxpool2x2")?;
    let [n, c, h, w] = input.shape();
    let (oh, ow) = (pooled(h), pooled(w));
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let x = input.data();
    let y = out.data_mut();
    let mut k = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let y0 = oy * 2;
            let y1 = (y0 + 2).min(h);
            for ox in 0..ow {
                let x0 = ox * 2;
                let x1 = (x0 + 2).min(w);
                let mut best = base + y0 * w + x0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let idx = base + yy * w + xx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y[k] = x[best];
                argmax.push(best);
                k += 1;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each pooled gradient back to the input element that won the max.
pub fn maxpool2x2_backward<T: Scalar>(
    input_shape: [usize; 4],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape;
    if grad_out.shape() != [n, c, pooled(h), pooled(w)] || argmax.len() != grad_out.len() {
        return Err(Error::shape(
            "maxpool2x2 backward",
            format!("{:?}", [n, c, pooled(h), pooled(w)]),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut gi = Tensor::zeros(input_shape);
    let g = gi.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        g[idx] = g[idx] + v;
    }
    Ok(gi)
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_in_place<T: Scalar>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// ReLU backward from the layer's *output*: the gradient passes where the output is positive.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::shape(
            "relu backward",
            format!("{:?}", output.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(output.shape(), data)
}

/// Collapses (C,H,W) into a single feature axis: `[n, c·h·w, 1, 1]`.
pub fn flatten_forward<T: Scalar>(input: Tensor<T>) -> Tensor<T> {
    let n = input.batch();
    let d = input.item_len();
    input.reshape([n, d, 1, 1]).expect("same element count")
}

pub fn flatten_backward<T: Scalar>(
    input_shape: [usize; 4],
    grad_out: Tensor<T>,
) -> Result<Tensor<T>> {
    grad_out.reshape(input_shape)
}

fn check_fc<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
) -> Result<(usize, usize)> {
    input.require_nonempty("fully_connected")?;
    let d = input.item_len();
    let [wi, wo, a, b] = weights.shape();
    if wi != d || a != 1 || b != 1 || wo == 0 {
        return Err(Error::shape(
            "fully_connected",
            format!("weights [{d}, out, 1, 1] for input {:?}", input.shape()),
            format!("weights {:?}", weights.shape()),
        ));
    }
    if bias.len() != wo {
        return Err(Error::shape("fully_connected bias", wo, bias.len()));
    }
    Ok((d, wo))
}

/// `y = x·W + b` where `x` is each batch item flattened; weights are `[in, out, 1, 1]`.
pub fn fc_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
) -> Result<Tensor<T>> {
    let (d, o) = check_fc(input, weights, bias)?;
    let n = input.batch();
    let mut out = Tensor::zeros([n, o, 1, 1]);
    T::gemm(
        n,
        d,
        o,
        input.data(),
        false,
        weights.data(),
        false,
        out.data_mut(),
        false,
    );
    for row in out.data_mut().chunks_mut(o) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
    Ok(out)
}

pub fn fc_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    grad_out: &Tensor<T>,
) -> Result<FcGrads<T>> {
    let (gi, gw, gb) = fc_backward_impl(input, weights, bias, grad_out, true)?;
    Ok(FcGrads {
        input: gi.expect("input gradient requested"),
        weights: gw,
        bias: gb,
    })
}

pub(crate) fn fc_backward_impl<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Vec<T>)> {
    let (d, o) = check_fc(input, weights, bias)?;
    let n = input.batch();
    if grad_out.shape() != [n, o, 1, 1] {
        return Err(Error::shape(
            "fully_connected backward",
            format!("{:?}", [n, o, 1, 1]),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let g = grad_out.data();
    let mut gw = Tensor::zeros(weights.shape());
    T::gemm(d, n, o, input.data(), true, g, false, gw.data_mut(), false);
    let mut gb = vec![T::zero(); o];
    for row in g.chunks(o) {
        for (b, &v) in gb.iter_mut().zip(row) {
            *b = *b + v;
        }
    }
    let gi = if need_input {
        let mut gi = Tensor::zeros(input.shape());
        T::gemm(
            n,
            o,
            d,
            g,
            false,
            weights.data(),
            true,
            gi.data_mut(),
            false,
        );
        Some(gi)
    } else {
        None
    };
    Ok((gi, gw, gb))
}

/// Row-wise softmax of `[n, k, 1, 1]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.item_len().max(1);
    let mut probs = logits.clone();
    for row in probs.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    probs
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape("softmax_nll labels", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label {
            label: bad,
            classes: k,
        });
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
///
/// Returns the loss and the class probabilities (needed by the backward pass).
pub fn softmax_nll_forward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    logits.require_nonempty("softmax_nll")?;
    let n = logits.batch();
    let k = logits.item_len();
    check_labels(labels, n, k)?;
    let mut loss = T::zero();
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss = loss + (lse - row[y]);
    }
    Ok((loss / T::from_f64(n as f64), softmax(logits)))
}

/// Gradient of the mean NLL with respect to the logits: `(p − onehot(y)) / n`.
pub fn softmax_nll_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let n = probs.batch();
    let k = probs.item_len();
    check_labels(labels, n, k)?;
    let scale = T::from_f64(1.0 / n as f64);
    let mut g = probs.clone();
    for (row, &y) in g.data_mut().chunks_mut(k).zip(labels) {
        row[y] = row[y] - T::one();
        for v in row.iter_mut() {
            *v = *v * scale;
        }
    }
    Ok(g)
}

/// Inverted dropout.
///
/// In train mode every element is zeroed with probability `p` and survivors
/// are scaled by `1/(1−p)`; the mask is returned for the backward pass. In
/// eval mode the input passes through unchanged and no randomness is consumed.
pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    check_dropout_p(p)?;
    match mode {
        Mode::Eval => Ok((input.clone(), None)),
        Mode::Train => {
            let keep = T::from_f64(1.0 / (1.0 - p));
            let mask: Vec<T> = (0..input.len())
                .map(|_| {
                    if rng.gen::<f64>() < p {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect();
            let out = input
                .data()
                .iter()
                .zip(&mask)
                .map(|(&x, &m)| x * m)
                .collect();
            Ok((Tensor::from_vec(input.shape(), out)?, Some(mask)))
        }
    }
}

pub fn dropout_backward<T: Scalar>(grad_out: &Tensor<T>, mask: Option<&[T]>) -> Result<Tensor<T>> {
    match mask {
        None => Ok(grad_out.clone()),
        Some(mask) => {
            if mask.len() != grad_out.len() {
                return Err(Error::shape("dropout backward", mask.len(), grad_out.len()));
            }
            let data = grad_out
                .data()
                .iter()
                .zip(mask)
                .map(|(&g, &m)| g * m)
                .collect();
            Tensor::from_vec(grad_out.shape(), data)
        }
    }
}

pub(crate) fn check_dropout_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    Ok(())
}
