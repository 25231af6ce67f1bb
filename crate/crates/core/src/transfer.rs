//! Reusing a trained network for a new binary task: last-k fine-tuning,
//! feature extraction at a named layer, logistic regression on features,
//! and the relabeling noise estimate.

use crate::data::{Dataset, FeatureMatrix};
use crate::error::{Error, Result};
use crate::model::{init_layers, Checkpoint, FreezeMask, LayerKind, ModelSpec, Preset};
use crate::network;
use crate::optim::{self, TrainConfig, TrainOutcome};
use crate::tensor::Tensor;

/// Fine-tunes the final `last_k` fully connected layers of `pretrained`.
///
/// The tail is reinitialised from `cfg.seed` and dropout is always off. The
/// frozen prefix is evaluated once per example and cached, which is exact
/// because it is deterministic without dropout. Every parameter outside the
/// tail is returned bitwise unchanged.
pub fn fine_tune(
    pretrained: &Checkpoint,
    last_k: usize,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !(1..=3).contains(&last_k) {
        return Err(Error::Config(format!(
            "last_k must be 1, 2 or 3, got {last_k}"
        )));
    }
    pretrained.check_shapes()?;
    let spec = &pretrained.spec;
    let tail = spec.last_param_layers(last_k)?;
    if let Some(&l) = tail
        .iter()
        .find(|&&l| !matches!(spec.layers[l], LayerKind::FullyConnected { .. }))
    {
        return Err(Error::Config(format!(
            "layer {} is not fully connected; only fully connected layers can be fine-tuned",
            spec.layer_names()[l]
        )));
    }
    let classes = spec.num_classes()?;
    for ds in [train_set, val_set] {
        if let Some(&y) = ds.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::shape(
                "fine-tuning labels",
                format!("{classes} classes"),
                format!("label {y}"),
            ));
        }
    }
    let cfg = TrainConfig {
        dropout_enabled: false,
        ..cfg.clone()
    };

    let mut model = pretrained.clone();
    init_layers(&mut model.params, &tail, model.spec.init, cfg.seed);

    // Train a headless copy on cached prefix activations.
    let start = tail[0];
    let head = split_head(&model, start)?;
    let head_train = prefix_features(&model, start, train_set)?;
    let head_val = prefix_features(&model, start, val_set)?;
    let mask = FreezeMask::all_trainable(&head.spec)?;
    let out = optim::train(&head, &mask, &head_train, &head_val, &cfg)?;

    let splice = |h: &Checkpoint| {
        let mut full = model.clone();
        for (dst, src) in full.params[start..].iter_mut().zip(&h.params) {
            *dst = src.clone();
        }
        full.meta = h.meta;
        full
    };
    Ok(TrainOutcome {
        best: splice(&out.best),
        last: splice(&out.last),
        curves: out.curves,
        batch_losses: out.batch_losses,
    })
}

// Layers `start..` of `model` as a standalone network.
fn split_head(model: &Checkpoint, start: usize) -> Result<Checkpoint> {
    let shapes = model.spec.infer_shapes()?;
    let spec = ModelSpec {
        name: format!("{}_head", model.spec.name),
        input_shape: shapes[start].input,
        layers: model.spec.layers[start..].to_vec(),
        init: model.spec.init,
    };
    let head = Checkpoint {
        spec,
        params: model.params[start..].to_vec(),
        meta: model.meta,
    };
    head.check_shapes()?;
    Ok(head)
}

// Activations entering layer `start` for every item of `ds`.
fn prefix_features(model: &Checkpoint, start: usize, ds: &Dataset) -> Result<Dataset> {
    let shape = if start == 0 {
        model.spec.input_shape
    } else {
        model.spec.infer_shapes()?[start].input
    };
    let rows = if start == 0 {
        ds.inputs.clone()
    } else {
        run_to(model, start - 1, ds)?
    };
    Dataset::from_parts(shape, rows, ds.labels.clone(), ds.ids.clone())
}

// Output of layer `last` for all items, concatenated in dataset order.
fn run_to(model: &Checkpoint, last: usize, ds: &Dataset) -> Result<Vec<f32>> {
    if ds.item_shape != model.spec.input_shape {
        return Err(Error::shape(
            "model input",
            format!("{:?}", model.spec.input_shape),
            format!("{:?}", ds.item_shape),
        ));
    }
    let shapes = model.spec.infer_shapes()?;
    let widest = shapes[..=last]
        .iter()
        .map(|s| s.output.iter().product::<usize>())
        .max()
        .unwrap_or(1);
    let bs = (16_000_000 / widest.max(1)).clamp(1, 256);
    let out_len: usize = shapes[last].output.iter().product();
    let mut rows = Vec::with_capacity(ds.len() * out_len);
    let order: Vec<usize> = (0..ds.len()).collect();
    for chunk in order.chunks(bs) {
        let (x, _) = ds.batch(chunk);
        let y: Tensor<f32> = network::forward_to(model, x, last)?;
        rows.extend_from_slice(y.data());
    }
    Ok(rows)
}

/// Inference-mode output of the layer called `layer_name`, one row per example.
pub fn extract_features(
    model: &Checkpoint,
    layer_name: &str,
    ds: &Dataset,
) -> Result<FeatureMatrix> {
    model.check_shapes()?;
    let last = model.spec.layer_index(layer_name)?;
    let dim: usize = model.spec.infer_shapes()?[last].output.iter().product();
    let rows = run_to(model, last, ds)?;
    FeatureMatrix::new(dim, rows, ds.ids.clone(), ds.labels.clone())
}

/// Fits a freshly initialised `logreg_head{d}` on feature rows.
pub fn train_logreg(
    train_fm: &FeatureMatrix,
    val_fm: &FeatureMatrix,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_logreg_on(
        Preset::LogregHead {
            in_dim: train_fm.dim,
        }
        .spec(),
        train_fm,
        val_fm,
        cfg,
    )
}

/// Fits a head with a declared input dimension; feature rows of any other width are rejected.
pub fn train_logreg_on(
    head: ModelSpec,
    train_fm: &FeatureMatrix,
    val_fm: &FeatureMatrix,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    for fm in [train_fm, val_fm] {
        if head.input_shape != [fm.dim, 1, 1] {
            return Err(Error::shape(
                "logistic regression features",
                format!("dimension {}", head.input_shape.iter().product::<usize>()),
                format!("dimension {}", fm.dim),
            ));
        }
        if let Some(&y) = fm.labels.iter().find(|&&y| y > 1) {
            return Err(Error::Label {
                label: y,
                classes: 2,
            });
        }
    }
    let model = Checkpoint::init(head, cfg.seed)?;
    let mask = FreezeMask::all_trainable(&model.spec)?;
    optim::train(
        &model,
        &mask,
        &train_fm.to_dataset(),
        &val_fm.to_dataset(),
        cfg,
    )
}

/// Label-noise fraction implied by re-labeling: `min(1, 2·disagreements / relabeled)`.
///
/// Assumes a rater who is unsure guesses uniformly, so half of the unstable
/// labels show up as disagreements.
pub fn estimate_label_noise(n_relabeled: u64, n_disagreements: u64) -> Result<f64> {
    if n_relabeled == 0 {
        return Err(Error::Argument("no relabeled entries".into()));
    }
    if n_disagreements > n_relabeled {
        return Err(Error::Argument(format!(
            "{n_disagreements} disagreements out of {n_relabeled} relabeled entries"
        )));
    }
    Ok((2.0 * n_disagreements as f64 / n_relabeled as f64).min(1.0))
}
