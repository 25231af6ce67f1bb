//! SGD with momentum and L2 weight decay, the epoch loop, early stopping,
//! evaluation and per-epoch error curves.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{zero_params, Checkpoint, FreezeMask, Params};
use crate::network::{self, Grads};
use crate::tensor::Tensor;

/// Optimisation hyperparameters for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Coefficient λ of the penalty λ·Σw² over weights (biases excluded).
    pub l2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout_enabled: bool,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::attractiveness()
    }
}

impl TrainConfig {
    /// Recipe for training the attractiveness network directly.
    pub fn attractiveness() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            l2: 0.001,
            epochs: 50,
            batch_size: 128,
            dropout_enabled: true,
            seed: 0,
            shuffle: true,
        }
    }

    pub fn gender() -> Self {
        TrainConfig {
            l2: 0.0001,
            epochs: 13,
            batch_size: 50,
            ..TrainConfig::attractiveness()
        }
    }

    /// Fine-tuning the tail of the gender network: no dropout, small batches.
    pub fn fine_tune() -> Self {
        TrainConfig {
            l2: 0.0001,
            epochs: 50,
            batch_size: 16,
            dropout_enabled: false,
            ..TrainConfig::attractiveness()
        }
    }

    /// Logistic regression on extracted features.
    pub fn logreg() -> Self {
        TrainConfig {
            learning_rate: 0.0001,
            momentum: 0.9,
            l2: 0.8,
            epochs: 50,
            batch_size: 128,
            dropout_enabled: false,
            seed: 0,
            shuffle: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 coefficient {} must be non-negative", self.l2));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        Ok(())
    }
}

/// One SGD step with classical momentum.
///
/// For trainable groups: `g' = g + 2·l2·w` (weights only), `v ← momentum·v − lr·g'`,
/// `w ← w + v`. Frozen groups are left untouched.
pub fn sgd_step(
    params: &mut Params,
    grads: &Grads,
    velocity: &mut Params,
    cfg: &TrainConfig,
    freeze: &FreezeMask,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            params.len(),
            format!("{} / {}", grads.len(), velocity.len()),
        ));
    }
    let lr = cfg.learning_rate as f32;
    let mu = cfg.momentum as f32;
    let decay = (2.0 * cfg.l2) as f32;
    for (layer, ((p, g), v)) in params
        .iter_mut()
        .zip(grads)
        .zip(velocity.iter_mut())
        .enumerate()
    {
        let Some(p) = p.as_mut() else { continue };
        let (train_w, train_b) = freeze.layer(layer);
        if !train_w && !train_b {
            continue;
        }
        let (Some(g), Some(v)) = (g.as_ref(), v.as_mut()) else {
            return Err(Error::shape(
                "sgd_step",
                format!("gradients for layer {layer}"),
                "none",
            ));
        };
        if g.weights.shape() != p.weights.shape()
            || v.weights.shape() != p.weights.shape()
            || g.bias.len() != p.bias.len()
            || v.bias.len() != p.bias.len()
        {
            return Err(Error::shape(
                "sgd_step",
                format!("layer {layer} weights {:?}", p.weights.shape()),
                format!("gradient {:?}", g.weights.shape()),
            ));
        }
        if train_w {
            for ((w, &gw), vw) in p
                .weights
                .data_mut()
                .iter_mut()
                .zip(g.weights.data())
                .zip(v.weights.data_mut())
            {
                let eff = gw + decay * *w;
                *vw = mu * *vw - lr * eff;
                *w += *vw;
            }
        }
        if train_b {
            for ((b, &gb), vb) in p.bias.iter_mut().zip(&g.bias).zip(v.bias.iter_mut()) {
                *vb = mu * *vb - lr * gb;
                *b += *vb;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Misclassification averaged over the epoch's mini-batches, measured
    /// before each batch's update and with dropout as configured.
    pub train_err: f64,
    pub val_err: f64,
}

/// Per-epoch training and validation misclassification rates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CurveLog {
    pub records: Vec<EpochRecord>,
}

pub const CURVE_HEADER: &str = "epoch,train_err,val_err";

impl CurveLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn push(&mut self, rec: EpochRecord) -> Result<()> {
        if !(0.0..=1.0).contains(&rec.train_err) || !(0.0..=1.0).contains(&rec.val_err) {
            return Err(Error::Data(format!(
                "epoch {} has a rate outside [0, 1]",
                rec.epoch
            )));
        }
        if let Some(prev) = self.records.last() {
            if rec.epoch <= prev.epoch {
                return Err(Error::Data(format!(
                    "epoch {} does not follow epoch {}",
                    rec.epoch, prev.epoch
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    /// Index into `records` of the lowest validation error (earliest on ties).
    pub fn best_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, r) in self.records.iter().enumerate() {
            if best.is_none_or(|b| r.val_err < self.records[b].val_err) {
                best = Some(i);
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CURVE_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{:.6},{:.6}", r.epoch, r.train_err, r.val_err);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CURVE_HEADER) {
            return Err(Error::Format(format!(
                "curve file must start with `{CURVE_HEADER}`"
            )));
        }
        let mut log = CurveLog::default();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("curve row {} is malformed: {line:?}", i + 1));
            if cols.len() != 3 {
                return Err(bad());
            }
            log.push(EpochRecord {
                epoch: cols[0].trim().parse().map_err(|_| bad())?,
                train_err: cols[1].trim().parse().map_err(|_| bad())?,
                val_err: cols[2].trim().parse().map_err(|_| bad())?,
            })?;
        }
        Ok(log)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        CurveLog::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Returns the checkpoint of the epoch with minimum validation error; ties go to the earliest epoch.
///
/// `checkpoints[i]` must belong to `curves.records[i]`.
pub fn select_early_stop(curves: &CurveLog, checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    if checkpoints.len() != curves.len() {
        return Err(Error::Argument(format!(
            "{} checkpoints for {} epochs",
            checkpoints.len(),
            curves.len()
        )));
    }
    let i = curves
        .best_index()
        .ok_or_else(|| Error::Argument("no epochs to select from".into()))?;
    Ok(checkpoints[i].clone())
}

/// Index of the largest probability; ties resolve to the lower class.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub misclassification: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub mean_nll: f64,
}

// Items per inference batch, bounded so the widest activation stays near 16M values.
fn eval_batch_size(ckpt: &Checkpoint) -> usize {
    let widest = ckpt
        .spec
        .infer_shapes()
        .map(|s| {
            s.iter()
                .map(|l| l.output.iter().product::<usize>())
                .max()
                .unwrap_or(1)
        })
        .unwrap_or(1);
    (16_000_000 / widest.max(1)).clamp(1, 256)
}

/// Probability rows for every item of `ds`, in dataset order (inference mode).
pub fn predict_dataset(ckpt: &Checkpoint, ds: &Dataset) -> Result<Vec<Vec<f32>>> {
    let bs = eval_batch_size(ckpt);
    let mut rows = Vec::with_capacity(ds.len());
    let order: Vec<usize> = (0..ds.len()).collect();
    for chunk in order.chunks(bs) {
        let (x, _) = ds.batch(chunk);
        let p = network::predict_proba(ckpt, x)?;
        let k = p.item_len();
        rows.extend(p.data().chunks(k).map(<[f32]>::to_vec));
    }
    Ok(rows)
}

/// Misclassification, accuracy, confusion matrix and mean NLL with dropout off.
pub fn evaluate(ckpt: &Checkpoint, ds: &Dataset) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let k = ckpt.spec.num_classes()?;
    let probs = predict_dataset(ckpt, ds)?;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut nll = 0.0f64;
    for (row, &y) in probs.iter().zip(&ds.labels) {
        if y >= k {
            return Err(Error::Label {
                label: y,
                classes: k,
            });
        }
        confusion[y][argmax(row)] += 1;
        nll -= (row[y] as f64).max(f64::MIN_POSITIVE).ln();
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let n = ds.len();
    let accuracy = correct as f64 / n as f64;
    Ok(EvalReport {
        n,
        misclassification: 1.0 - accuracy,
        accuracy,
        confusion,
        mean_nll: nll / n as f64,
    })
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curves: CurveLog,
    /// Checkpoint at the epoch of lowest validation error (the input model when no epochs ran).
    pub best: Checkpoint,
    /// Model after the final epoch.
    pub last: Checkpoint,
    /// Mean NLL of every mini-batch, in training order.
    pub batch_losses: Vec<f32>,
}

pub(crate) const SHUFFLE_STREAM: u64 = 1;
pub(crate) const DROPOUT_STREAM: u64 = 2;

/// Trains `model` on `train`, measuring validation error after every epoch.
///
/// Each epoch reshuffles (when enabled) from the run seed, visits every
/// example once in mini-batches (a short final batch is kept), and applies
/// one [`sgd_step`] per batch. Frozen parameter groups are never modified.
pub fn train(
    model: &Checkpoint,
    freeze: &FreezeMask,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_shapes()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(
            "training and validation sets must be non-empty".into(),
        ));
    }
    if cfg.batch_size > train_set.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training examples",
            cfg.batch_size,
            train_set.len()
        )));
    }
    if !freeze.any_trainable() {
        return Err(Error::Config("no trainable parameter groups".into()));
    }
    for ds in [train_set, val_set] {
        if ds.item_shape != model.spec.input_shape {
            return Err(Error::shape(
                "training data",
                format!("{:?}", model.spec.input_shape),
                format!("{:?}", ds.item_shape),
            ));
        }
    }
    let classes = model.spec.num_classes()?;
    if let Some(&bad) = train_set
        .labels
        .iter()
        .chain(&val_set.labels)
        .find(|&&l| l >= classes)
    {
        return Err(Error::Label {
            label: bad,
            classes,
        });
    }

    let stop = freeze.first_trainable_layer().unwrap_or(0);
    let mode = if cfg.dropout_enabled {
        Mode::Train
    } else {
        Mode::Eval
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);

    let mut current = model.clone();
    current.meta.seed = cfg.seed;
    let mut velocity = zero_params(&model.spec)?;
    let mut best = current.clone();
    let mut best_val = f64::INFINITY;
    let mut curves = CurveLog::default();
    let mut batch_losses = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut mistakes = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.batch(idx);
            let pass = network::loss_and_grads(&current, x, &y, mode, &mut dropout_rng, stop)?;
            if !pass.loss.is_finite() {
                return Err(Error::Numeric {
                    epoch,
                    batch: b + 1,
                });
            }
            mistakes += count_mistakes(&pass.probs, &y);
            batch_losses.push(pass.loss);
            sgd_step(&mut current.params, &pass.grads, &mut velocity, cfg, freeze)?;
        }
        let train_err = mistakes as f64 / train_set.len() as f64;
        let val_err = evaluate(&current, val_set)?.misclassification;
        curves.push(EpochRecord {
            epoch,
            train_err,
            val_err,
        })?;
        current.meta.epoch = epoch as u32;
        current.meta.train_err = train_err;
        current.meta.val_err = val_err;
        log::info!(
            "{} epoch {epoch}/{}: train_err {train_err:.4} val_err {val_err:.4}",
            model.spec.name,
            cfg.epochs
        );
        if val_err < best_val {
            best_val = val_err;
            best = current.clone();
        }
    }
    Ok(TrainOutcome {
        curves,
        best,
        last: current,
        batch_losses,
    })
}

fn count_mistakes(probs: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = probs.item_len();
    probs
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) != y)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerParams, ModelSpec, Preset};

    fn scalar_model(w: f32) -> (Params, Params, FreezeMask) {
        let spec = Preset::LogregHead { in_dim: 1 }.spec();
        let mut p = zero_params(&spec).unwrap();
        let fc = spec.layer_index("fc1").unwrap();
        p[fc].as_mut().unwrap().weights.data_mut()[0] = w;
        let v = zero_params(&spec).unwrap();
        (p, v, FreezeMask::all_trainable(&spec).unwrap())
    }

    fn grads_like(p: &Params, g: f32) -> Grads {
        p.iter()
            .map(|l| {
                l.as_ref().map(|l| LayerParams {
                    weights: l.weights.map(|_| g),
                    bias: vec![g; l.bias.len()],
                })
            })
            .collect()
    }

    fn w0(p: &Params) -> f32 {
        p[1].as_ref().unwrap().weights.data()[0]
    }

    fn cfg(lr: f64, momentum: f64, l2: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            momentum,
            l2,
            ..TrainConfig::attractiveness()
        }
    }

    #[test]
    fn vanilla_step() {
        let (mut p, mut v, m) = scalar_model(1.0);
        let g = grads_like(&p, 2.0);
        sgd_step(&mut p, &g, &mut v, &cfg(0.1, 0.0, 0.0), &m).unwrap();
        assert!((w0(&p) - 0.8).abs() < 1e-7);
    }

    #[test]
    fn momentum_recurrence() {
        let (mut p, mut v, m) = scalar_model(0.0);
        let g = grads_like(&p, 1.0);
        let c = cfg(0.1, 0.9, 0.0);
        sgd_step(&mut p, &g, &mut v, &c, &m).unwrap();
        assert!((w0(&p) + 0.1).abs() < 1e-7);
        assert!((w0(&v) + 0.1).abs() < 1e-7);
        sgd_step(&mut p, &g, &mut v, &c, &m).unwrap();
        assert!((w0(&v) + 0.19).abs() < 1e-7);
        assert!((w0(&p) + 0.29).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_decays_velocity_only() {
        let (mut p, mut v, m) = scalar_model(0.5);
        v[1].as_mut().unwrap().weights.data_mut()[0] = 0.2;
        let g = grads_like(&p, 0.0);
        sgd_step(&mut p, &g, &mut v, &cfg(0.1, 0.9, 0.0), &m).unwrap();
        assert!((w0(&v) - 0.18).abs() < 1e-7);
        assert!((w0(&p) - 0.68).abs() < 1e-7);
    }

    #[test]
    fn weight_decay_skips_bias() {
        let (mut p, mut v, m) = scalar_model(1.0);
        p[1].as_mut().unwrap().bias[0] = 1.0;
        let g = grads_like(&p, 0.0);
        sgd_step(&mut p, &g, &mut v, &cfg(0.1, 0.0, 0.5), &m).unwrap();
        assert!((w0(&p) - 0.9).abs() < 1e-7);
        assert_eq!(p[1].as_ref().unwrap().bias[0], 1.0);
    }

    #[test]
    fn frozen_groups_untouched() {
        let (mut p, mut v, mut m) = scalar_model(1.0);
        m.set_group(0, false);
        let g = grads_like(&p, 3.0);
        sgd_step(&mut p, &g, &mut v, &cfg(0.1, 0.0, 0.0), &m).unwrap();
        assert_eq!(w0(&p), 1.0);
        assert!((p[1].as_ref().unwrap().bias[0] + 0.3).abs() < 1e-7);
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let (mut p, mut v, m) = scalar_model(1.0);
        let mut g = grads_like(&p, 1.0);
        g[1].as_mut().unwrap().bias.push(0.0);
        assert!(matches!(
            sgd_step(&mut p, &g, &mut v, &cfg(0.1, 0.0, 0.0), &m),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::attractiveness().validate().is_ok());
        assert!(cfg(0.0, 0.9, 0.0).validate().is_err());
        assert!(cfg(0.1, 1.0, 0.0).validate().is_err());
        assert!(cfg(0.1, 0.5, -1.0).validate().is_err());
        let mut c = TrainConfig::gender();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn early_stop_selection() {
        let spec: ModelSpec = Preset::LogregHead { in_dim: 2 }.spec();
        let select = |vals: &[f64]| {
            let mut log = CurveLog::default();
            let mut cks = Vec::new();
            for (i, &v) in vals.iter().enumerate() {
                log.push(EpochRecord {
                    epoch: i + 1,
                    train_err: 0.1,
                    val_err: v,
                })
                .unwrap();
                let mut c = Checkpoint::init(spec.clone(), 0).unwrap();
                c.meta.epoch = i as u32 + 1;
                cks.push(c);
            }
            select_early_stop(&log, &cks).unwrap().meta.epoch
        };
        assert_eq!(select(&[0.3, 0.2, 0.25]), 2);
        assert_eq!(select(&[0.3, 0.2, 0.2]), 2);
        assert_eq!(select(&[0.5, 0.4, 0.3, 0.1]), 4);
    }

    #[test]
    fn curve_csv_format() {
        let mut log = CurveLog::default();
        log.push(EpochRecord {
            epoch: 1,
            train_err: 0.5,
            val_err: 1.0 / 3.0,
        })
        .unwrap();
        log.push(EpochRecord {
            epoch: 2,
            train_err: 0.25,
            val_err: 0.3,
        })
        .unwrap();
        let csv = log.to_csv();
        assert_eq!(
            csv,
            "epoch,train_err,val_err\n1,0.500000,0.333333\n2,0.250000,0.300000\n"
        );
        assert_eq!(CurveLog::from_csv(&csv).unwrap().to_csv(), csv);
        assert!(log
            .push(EpochRecord {
                epoch: 2,
                train_err: 0.1,
                val_err: 0.1
            })
            .is_err());
        assert!(CurveLog::from_csv("epoch,train_err,val_err\n1,1.5,0.1\n").is_err());
        assert!(CurveLog::from_csv("epoch,loss\n").is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.8]), 1);
    }
}
