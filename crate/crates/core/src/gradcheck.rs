//! Central finite-difference verification of every layer's backward pass, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, Mode};
use crate::model::LayerKind;
use crate::tensor::Tensor;

/// Outcome of checking one layer instance.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub layer: String,
    pub input_shape: [usize; 4],
    /// Largest `|a − n| / max(1e-8, |a| + |n|)` over all checked entries.
    pub max_rel_err: f64,
    /// Which tensor/entry produced the maximum.
    pub worst: String,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error used throughout the harness.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

struct Probe {
    worst: f64,
    at: String,
    checked: usize,
}

impl Probe {
    fn record(&mut self, group: &str, idx: usize, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.worst || self.at.is_empty() {
            self.worst = self.worst.max(e);
            self.at = format!("{group}[{idx}] analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }
}

// Perturbs each entry of `values` by ±eps, evaluates `loss`, and compares with `analytic`.
fn sweep(
    probe: &mut Probe,
    group: &str,
    values: &mut [f64],
    analytic: &[f64],
    eps: f64,
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<()> {
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + eps;
        let plus = loss(values)?;
        values[i] = orig - eps;
        let minus = loss(values)?;
        values[i] = orig;
        probe.record(group, i, analytic[i], (plus - minus) / (2.0 * eps));
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &Tensor<f64>, b: &[f64]) -> f64 {
    a.data().iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks one layer kind on a random instance with the given input shape.
///
/// Non-terminal layers are reduced to a scalar through a random projection
/// `L = Σ y ⊙ r`; the softmax layer uses its own NLL. Inputs are chosen so
/// that no finite-difference probe crosses a kink: ReLU inputs stay at least
/// 0.1 from zero and pool windows hold values at least 0.01 apart.
pub fn gradient_check(
    kind: &LayerKind,
    input_shape: [usize; 4],
    eps: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_in: usize = input_shape.iter().product();
    if n_in == 0 {
        return Err(Error::shape(
            "gradient_check",
            "non-empty input",
            format!("{input_shape:?}"),
        ));
    }
    let mut probe = Probe {
        worst: 0.0,
        at: String::new(),
        checked: 0,
    };
    let [n, c, h, w] = input_shape;
    match kind {
        LayerKind::Conv3x3 { out_maps, bias } => {
            let mut x = uniform(&mut rng, n_in);
            let mut wt = uniform(&mut rng, out_maps * c * 9);
            let (oh, ow) = (h.saturating_sub(2), w.saturating_sub(2));
            let mut b = uniform(&mut rng, layers::conv_bias_len(*bias, *out_maps, oh, ow));
            let r = uniform(&mut rng, n * out_maps * oh * ow);
            let wshape = [*out_maps, c, 3, 3];
            let f = |x: &[f64], wt: &[f64], b: &[f64]| -> Result<f64> {
                let y = layers::conv3x3_forward(
                    &Tensor::from_vec(input_shape, x.to_vec())?,
                    &Tensor::from_vec(wshape, wt.to_vec())?,
                    b,
                    *bias,
                )?;
                Ok(dot(&y, &r))
            };
            let g = layers::conv3x3_backward(
                &Tensor::from_vec(input_shape, x.clone())?,
                &Tensor::from_vec(wshape, wt.clone())?,
                &b,
                *bias,
                &Tensor::from_vec([n, *out_maps, oh, ow], r.clone())?,
            )?;
            let (w0, b0) = (wt.clone(), b.clone());
            sweep(&mut probe, "input", &mut x, g.input.data(), eps, |v| {
                f(v, &w0, &b0)
            })?;
            let x0 = x.clone();
            sweep(&mut probe, "weights", &mut wt, g.weights.data(), eps, |v| {
                f(&x0, v, &b0)
            })?;
            let w1 = wt.clone();
            sweep(&mut probe, "bias", &mut b, &g.bias, eps, |v| f(&x0, &w1, v))?;
        }
        LayerKind::FullyConnected { out_units } => {
            let d = c * h * w;
            let mut x = uniform(&mut rng, n_in);
            let mut wt = uniform(&mut rng, d * out_units);
            let mut b = uniform(&mut rng, *out_units);
            let r = uniform(&mut rng, n * out_units);
            let wshape = [d, *out_units, 1, 1];
            let f = |x: &[f64], wt: &[f64], b: &[f64]| -> Result<f64> {
                let y = layers::fc_forward(
                    &Tensor::from_vec(input_shape, x.to_vec())?,
                    &Tensor::from_vec(wshape, wt.to_vec())?,
                    b,
                )?;
                Ok(dot(&y, &r))
            };
            let g = layers::fc_backward(
                &Tensor::from_vec(input_shape, x.clone())?,
                &Tensor::from_vec(wshape, wt.clone())?,
                &b,
                &Tensor::from_vec([n, *out_units, 1, 1], r.clone())?,
            )?;
            let (w0, b0) = (wt.clone(), b.clone());
            sweep(&mut probe, "input", &mut x, g.input.data(), eps, |v| {
                f(v, &w0, &b0)
            })?;
            let x0 = x.clone();
            sweep(&mut probe, "weights", &mut wt, g.weights.data(), eps, |v| {
                f(&x0, v, &b0)
            })?;
            let w1 = wt.clone();
            sweep(&mut probe, "bias", &mut b, &g.bias, eps, |v| f(&x0, &w1, v))?;
        }
        LayerKind::Relu => {
            let mut x: Vec<f64> = (0..n_in)
                .map(|_| {
                    let m = rng.gen_range(0.1..1.0);
                    if rng.gen::<bool>() {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            let r = uniform(&mut rng, n_in);
            let xt = Tensor::from_vec(input_shape, x.clone())?;
            let y = layers::relu_forward(&xt);
            let g = layers::relu_backward(&y, &Tensor::from_vec(input_shape, r.clone())?)?;
            sweep(&mut probe, "input", &mut x, g.data(), eps, |v| {
                Ok(dot(
                    &layers::relu_forward(&Tensor::from_vec(input_shape, v.to_vec())?),
                    &r,
                ))
            })?;
        }
        LayerKind::MaxPool2x2 => {
            // distinct values on a 0.01 grid, shuffled
            let mut x: Vec<f64> = (0..n_in)
                .map(|i| i as f64 * 0.01 - n_in as f64 * 0.005)
                .collect();
            for i in (1..x.len()).rev() {
                let j = rng.gen_range(0..=i);
                x.swap(i, j);
            }
            let out_shape = [n, c, layers::pooled(h), layers::pooled(w)];
            let r = uniform(&mut rng, out_shape.iter().product());
            let (_, idx) = layers::maxpool2x2_forward(&Tensor::from_vec(input_shape, x.clone())?)?;
            let g = layers::maxpool2x2_backward(
                input_shape,
                &idx,
                &Tensor::from_vec(out_shape, r.clone())?,
            )?;
            sweep(&mut probe, "input", &mut x, g.data(), eps, |v| {
                let (y, _) =
                    layers::maxpool2x2_forward(&Tensor::from_vec(input_shape, v.to_vec())?)?;
                Ok(dot(&y, &r))
            })?;
        }
        LayerKind::Flatten => {
            let mut x = uniform(&mut rng, n_in);
            let r = uniform(&mut rng, n_in);
            let g = layers::flatten_backward(
                input_shape,
                Tensor::from_vec([n, c * h * w, 1, 1], r.clone())?,
            )?;
            sweep(&mut probe, "input", &mut x, g.data(), eps, |v| {
                Ok(dot(
                    &layers::flatten_forward(Tensor::from_vec(input_shape, v.to_vec())?),
                    &r,
                ))
            })?;
        }
        LayerKind::Dropout { p } => {
            let mut x = uniform(&mut rng, n_in);
            let r = uniform(&mut rng, n_in);
            let mask_seed: u64 = rng.gen();
            // the same stream reproduces the same mask on every evaluation
            let f = |v: &[f64]| -> Result<f64> {
                let mut mrng = ChaCha8Rng::seed_from_u64(mask_seed);
                let (y, _) = layers::dropout_forward(
                    &Tensor::from_vec(input_shape, v.to_vec())?,
                    *p,
                    Mode::Train,
                    &mut mrng,
                )?;
                Ok(dot(&y, &r))
            };
            let mut mrng = ChaCha8Rng::seed_from_u64(mask_seed);
            let (_, mask) = layers::dropout_forward(
                &Tensor::from_vec(input_shape, x.clone())?,
                *p,
                Mode::Train,
                &mut mrng,
            )?;
            let g = layers::dropout_backward(
                &Tensor::from_vec(input_shape, r.clone())?,
                mask.as_deref(),
            )?;
            sweep(&mut probe, "input", &mut x, g.data(), eps, f)?;
        }
        LayerKind::SoftmaxNll => {
            let k = c * h * w;
            let mut x: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let (_, probs) =
                layers::softmax_nll_forward(&Tensor::from_vec(input_shape, x.clone())?, &labels)?;
            let g = layers::softmax_nll_backward(&probs, &labels)?;
            sweep(&mut probe, "logits", &mut x, g.data(), eps, |v| {
                Ok(layers::softmax_nll_forward(
                    &Tensor::from_vec(input_shape, v.to_vec())?,
                    &labels,
                )?
                .0)
            })?;
        }
    }
    Ok(GradCheckReport {
        layer: kind.to_string(),
        input_shape,
        max_rel_err: probe.worst,
        worst: probe.at,
        checked: probe.checked,
        tolerance,
        passed: probe.worst <= tolerance,
    })
}
