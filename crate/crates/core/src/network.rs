//! Executes a [`Checkpoint`] forward and backward over a batch.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{self, Mode};
use crate::model::{Checkpoint, LayerKind, LayerParams, Params};
use crate::tensor::Tensor;

/// Gradients laid out like [`Params`]: `Some` for parameterized layers that were reached.
pub type Grads = Params;

/// Result of one forward/backward pass over a labelled batch.
#[derive(Debug, Clone)]
pub struct BatchPass {
    pub loss: f32,
    pub probs: Tensor<f32>,
    pub grads: Grads,
}

fn params_of(params: &Params, i: usize) -> Result<&LayerParams> {
    params[i]
        .as_ref()
        .ok_or_else(|| Error::Corrupt(format!("layer {i} is missing its parameters")))
}

fn check_input(ckpt: &Checkpoint, input: &Tensor<f32>) -> Result<()> {
    let [_, c, h, w] = input.shape();
    if [c, h, w] != ckpt.spec.input_shape {
        return Err(Error::shape(
            "model input",
            format!("{:?}", ckpt.spec.input_shape),
            format!("{:?}", [c, h, w]),
        ));
    }
    input.require_nonempty("model input")
}

/// Applies one non-terminal layer. Returns the output plus any state needed
/// for the backward pass (pool argmax or dropout mask).
fn apply<R: Rng + ?Sized>(
    kind: &LayerKind,
    params: &Params,
    i: usize,
    x: Tensor<f32>,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<f32>, Option<Vec<usize>>, Option<Vec<f32>>)> {
    Ok(match kind {
        LayerKind::Conv3x3 { bias, .. } => {
            let p = params_of(params, i)?;
            (
                layers::conv3x3_forward(&x, &p.weights, &p.bias, *bias)?,
                None,
                None,
            )
        }
        LayerKind::FullyConnected { .. } => {
            let p = params_of(params, i)?;
            (layers::fc_forward(&x, &p.weights, &p.bias)?, None, None)
        }
        LayerKind::MaxPool2x2 => {
            let (y, idx) = layers::maxpool2x2_forward(&x)?;
            (y, Some(idx), None)
        }
        LayerKind::Relu => {
            let mut y = x;
            layers::relu_in_place(&mut y);
            (y, None, None)
        }
        LayerKind::Flatten => (layers::flatten_forward(x), None, None),
        LayerKind::Dropout { p } => {
            let (y, mask) = layers::dropout_forward(&x, *p, mode, rng)?;
            (y, None, mask)
        }
        LayerKind::SoftmaxNll => (layers::softmax(&x), None, None),
    })
}

/// Inference (dropout off) through layers `0..=last`, returning that layer's output.
pub fn forward_to(ckpt: &Checkpoint, input: Tensor<f32>, last: usize) -> Result<Tensor<f32>> {
    check_input(ckpt, &input)?;
    if last >= ckpt.spec.layers.len() {
        return Err(Error::Config(format!("layer index {last} out of range")));
    }
    let mut x = input;
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    for (i, kind) in ckpt.spec.layers.iter().enumerate().take(last + 1) {
        x = apply(kind, &ckpt.params, i, x, Mode::Eval, &mut unused)?.0;
    }
    Ok(x)
}

/// Class probabilities under inference mode, shape `[n, classes, 1, 1]`.
pub fn predict_proba(ckpt: &Checkpoint, input: Tensor<f32>) -> Result<Tensor<f32>> {
    forward_to(ckpt, input, ckpt.spec.layers.len() - 1)
}

/// Forward pass in `mode`, NLL loss against `labels`, then backward down to
/// layer `stop` (inclusive). Layers below `stop` get no gradients and no
/// input gradient is formed for `stop` itself.
pub fn loss_and_grads<R: Rng + ?Sized>(
    ckpt: &Checkpoint,
    input: Tensor<f32>,
    labels: &[usize],
    mode: Mode,
    rng: &mut R,
    stop: usize,
) -> Result<BatchPass> {
    check_input(ckpt, &input)?;
    let spec = &ckpt.spec;
    let n_layers = spec.layers.len();
    let last = n_layers - 1;
    if !matches!(spec.layers[last], LayerKind::SoftmaxNll) {
        return Err(Error::Config("model must end with a softmax layer".into()));
    }

    // acts[i] is the input of layer i; layers that only need their output or a
    // mask for the backward pass consume their input in place.
    let mut acts: Vec<Tensor<f32>> = Vec::with_capacity(n_layers);
    let mut in_shapes = Vec::with_capacity(n_layers);
    let mut argmax: Vec<Option<Vec<usize>>> = vec![None; n_layers];
    let mut masks: Vec<Option<Vec<f32>>> = vec![None; n_layers];
    acts.push(input);
    for (i, kind) in spec.layers.iter().enumerate().take(last) {
        in_shapes.push(acts[i].shape());
        let in_place = matches!(
            kind,
            LayerKind::Relu | LayerKind::Flatten | LayerKind::Dropout { .. }
        ) && (i == 0 || !matches!(spec.layers[i - 1], LayerKind::Relu));
        let x = if in_place {
            std::mem::replace(&mut acts[i], Tensor::zeros([0, 0, 0, 0]))
        } else {
            acts[i].clone()
        };
        let (y, idx, mask) = apply(kind, &ckpt.params, i, x, mode, rng)?;
        argmax[i] = idx;
        masks[i] = mask;
        acts.push(y);
    }
    let (loss, probs) = layers::softmax_nll_forward(&acts[last], labels)?;
    let mut grads: Grads = vec![None; n_layers];
    let mut g = layers::softmax_nll_backward(&probs, labels)?;
    let stop = stop.min(last);
    for i in (stop..last).rev() {
        let need_input = i > stop;
        g = match &spec.layers[i] {
            LayerKind::Conv3x3 { bias, .. } => {
                let p = params_of(&ckpt.params, i)?;
                let (gi, gw, gb) = layers::conv3x3_backward_impl(
                    &acts[i], &p.weights, &p.bias, *bias, &g, need_input,
                )?;
                grads[i] = Some(LayerParams {
                    weights: gw,
                    bias: gb,
                });
                match gi {
                    Some(gi) => gi,
                    None => break,
                }
            }
            LayerKind::FullyConnected { .. } => {
                let p = params_of(&ckpt.params, i)?;
                let (gi, gw, gb) =
                    layers::fc_backward_impl(&acts[i], &p.weights, &p.bias, &g, need_input)?;
                grads[i] = Some(LayerParams {
                    weights: gw,
                    bias: gb,
                });
                match gi {
                    Some(gi) => gi,
                    None => break,
                }
            }
            LayerKind::MaxPool2x2 => {
                layers::maxpool2x2_backward(in_shapes[i], argmax[i].as_deref().unwrap_or(&[]), &g)?
            }
            LayerKind::Relu => layers::relu_backward(&acts[i + 1], &g)?,
            LayerKind::Flatten => layers::flatten_backward(in_shapes[i], g)?,
            LayerKind::Dropout { .. } => layers::dropout_backward(&g, masks[i].as_deref())?,
            LayerKind::SoftmaxNll => unreachable!("softmax is the final layer"),
        };
        acts.truncate(i + 1);
    }
    Ok(BatchPass { loss, probs, grads })
}
