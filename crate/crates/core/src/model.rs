//! Sequential model descriptions, the two preset architectures, shape
//! inference, parameter bookkeeping and freezing.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{conv_bias_len, pooled, BiasMode};
use crate::tensor::Tensor;

/// Half-width of the uniform weight initialisation interval.
pub const INIT_RANGE: f32 = 0.06;

/// Dropout probability used by both preset networks on their hidden fully connected layers.
pub const PRESET_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv3x3 { out_maps: usize, bias: BiasMode },
    MaxPool2x2,
    Relu,
    Flatten,
    FullyConnected { out_units: usize },
    Dropout { p: f64 },
    SoftmaxNll,
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv3x3 { .. } | LayerKind::FullyConnected { .. }
        )
    }

    fn prefix(&self) -> &'static str {
        match self {
            LayerKind::Conv3x3 { .. } => "conv",
            LayerKind::MaxPool2x2 => "pool",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
            LayerKind::FullyConnected { .. } => "fc",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::SoftmaxNll => "softmax",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::Conv3x3 { out_maps, bias } => {
                write!(f, "Conv3x3-{out_maps}")?;
                if *bias == BiasMode::Untied {
                    write!(f, " (untied)")?;
                }
                Ok(())
            }
            LayerKind::MaxPool2x2 => write!(f, "MaxPool-2x2"),
            LayerKind::Relu => write!(f, "ReLU"),
            LayerKind::Flatten => write!(f, "Flatten"),
            LayerKind::FullyConnected { out_units } => write!(f, "FC-{out_units}"),
            LayerKind::Dropout { p } => write!(f, "Dropout({p})"),
            LayerKind::SoftmaxNll => write!(f, "Softmax"),
        }
    }
}

/// Weight initialisation rule; biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InitScheme {
    /// U(−range, range) for every layer.
    Uniform { range: f32 },
    /// U(−r, r) with `r = sqrt(6 / fan_in)` per layer.
    FanIn,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::Uniform { range: INIT_RANGE }
    }
}

impl InitScheme {
    /// Half-width for a layer whose weights have shape `w`.
    pub fn range(self, w: [usize; 4]) -> f32 {
        match self {
            InitScheme::Uniform { range } => range,
            InitScheme::FanIn => {
                // conv weights are [out, in, k, k]; fully connected are [in, out, 1, 1]
                let fan_in = if w[2] * w[3] > 1 {
                    w[1] * w[2] * w[3]
                } else {
                    w[0]
                };
                (6.0 / fan_in.max(1) as f32).sqrt()
            }
        }
    }
}

/// An ordered stack of layers applied to inputs of shape `(C, H, W)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerKind>,
    #[serde(default)]
    pub init: InitScheme,
}

/// Input and output shape of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerShape {
    pub index: usize,
    pub name: String,
    pub kind: LayerKind,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

/// Shapes of the parameters owned by one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamShape {
    pub layer: usize,
    pub weights: [usize; 4],
    pub bias: usize,
}

impl ParamShape {
    pub fn count(&self) -> usize {
        self.weights.iter().product::<usize>() + self.bias
    }
}

/// Named architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Attractiveness,
    Gender,
    LogregHead { in_dim: usize },
}

/// Resolution and width scaling applied to a preset.
///
/// The defaults reproduce the published architectures; smaller values give
/// proportionally shrunk variants for desk-scale experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PresetOptions {
    pub input_side: usize,
    pub width_divisor: usize,
}

impl Default for PresetOptions {
    fn default() -> Self {
        PresetOptions {
            input_side: 250,
            width_divisor: 1,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attractiveness" => Ok(Preset::Attractiveness),
            "gender" => Ok(Preset::Gender),
            _ => {
                if let Some(dim) = s.strip_prefix("logreg_head") {
                    let dim = dim
                        .trim_start_matches([':', '{', '='])
                        .trim_end_matches('}');
                    let in_dim = dim.parse().map_err(|_| {
                        Error::Config(format!("bad logreg_head dimension in {s:?}"))
                    })?;
                    return Ok(Preset::LogregHead { in_dim });
                }
                Err(Error::Config(format!(
                    "unknown preset {s:?} (expected attractiveness, gender or logreg_head:<dim>)"
                )))
            }
        }
    }
}

/// Builds a preset by name at its published size.
pub fn build_preset(name: &str) -> Result<ModelSpec> {
    Ok(name.parse::<Preset>()?.spec())
}

impl Preset {
    pub fn spec(self) -> ModelSpec {
        self.spec_with(PresetOptions::default())
    }

    pub fn spec_with(self, opts: PresetOptions) -> ModelSpec {
        let div = opts.width_divisor.max(1);
        let side = opts.input_side;
        let width = |n: usize| (n / div).max(1);
        let conv = |n: usize| LayerKind::Conv3x3 {
            out_maps: width(n),
            bias: BiasMode::Untied,
        };
        let fc = |n: usize| LayerKind::FullyConnected { out_units: n };
        let dropout = LayerKind::Dropout { p: PRESET_DROPOUT };
        use LayerKind::{Flatten, MaxPool2x2 as Pool, Relu, SoftmaxNll};
        match self {
            Preset::Attractiveness => {
                let mut layers = Vec::new();
                for maps in [8, 16, 16, 32, 32] {
                    layers.extend([conv(maps), Relu, Pool]);
                }
                layers.extend([
                    Flatten,
                    dropout.clone(),
                    fc(width(32)),
                    Relu,
                    dropout,
                    fc(width(16)),
                    Relu,
                    fc(2),
                    SoftmaxNll,
                ]);
                ModelSpec {
                    name: "attractiveness".into(),
                    input_shape: [3, side, side],
                    layers,
                    init: InitScheme::FanIn,
                }
            }
            Preset::Gender => {
                let mut layers = vec![conv(64), Relu, Pool];
                for maps in [128, 256, 512] {
                    layers.extend([conv(maps), Relu, conv(maps), Relu, Pool]);
                }
                // The final pool brings 8x8 maps down to 4x4 ahead of FC-1024.
                layers.extend([conv(512), Relu, conv(512), Relu, Pool]);
                layers.extend([
                    Flatten,
                    dropout.clone(),
                    fc(width(1024)),
                    Relu,
                    dropout,
                    fc(width(512)),
                    Relu,
                    fc(2),
                    SoftmaxNll,
                ]);
                ModelSpec {
                    name: "gender".into(),
                    input_shape: [3, side, side],
                    layers,
                    init: InitScheme::default(),
                }
            }
            Preset::LogregHead { in_dim } => ModelSpec {
                name: format!("logreg_head_{in_dim}"),
                input_shape: [in_dim, 1, 1],
                layers: vec![Flatten, fc(2), SoftmaxNll],
                init: InitScheme::default(),
            },
        }
    }
}

impl ModelSpec {
    /// Per-layer names such as `conv3` or `fc2`, numbered per kind from 1.
    pub fn layer_names(&self) -> Vec<String> {
        let mut counts = std::collections::HashMap::new();
        self.layers
            .iter()
            .map(|l| {
                let c = counts.entry(l.prefix()).or_insert(0usize);
                *c += 1;
                format!("{}{}", l.prefix(), c)
            })
            .collect()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        let names = self.layer_names();
        names.iter().position(|n| n == name).ok_or_else(|| {
            Error::Config(format!(
                "unknown layer {name:?}; valid layers: {}",
                names.join(", ")
            ))
        })
    }

    /// Input and output shapes of every layer.
    pub fn infer_shapes(&self) -> Result<Vec<LayerShape>> {
        let names = self.layer_names();
        let mut cur = self.input_shape;
        if cur.iter().any(|&d| d == 0) {
            return Err(Error::shape(
                "model input",
                "all extents >= 1",
                format!("{cur:?}"),
            ));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (index, kind) in self.layers.iter().enumerate() {
            let [c, h, w] = cur;
            let next = match kind {
                LayerKind::Conv3x3 { out_maps, .. } => {
                    if h < 3 || w < 3 || *out_maps == 0 {
                        return Err(Error::shape(
                            &format!("layer {index} ({})", names[index]),
                            "input extent >= 3",
                            format!("{h}x{w}"),
                        ));
                    }
                    [*out_maps, h - 2, w - 2]
                }
                LayerKind::MaxPool2x2 => [c, pooled(h), pooled(w)],
                LayerKind::Relu | LayerKind::Dropout { .. } => cur,
                LayerKind::Flatten => [c * h * w, 1, 1],
                LayerKind::FullyConnected { out_units } => {
                    if *out_units == 0 {
                        return Err(Error::shape(
                            &format!("layer {index} ({})", names[index]),
                            "at least one output unit",
                            0,
                        ));
                    }
                    [*out_units, 1, 1]
                }
                LayerKind::SoftmaxNll => {
                    if h != 1 || w != 1 || c < 2 {
                        return Err(Error::shape(
                            &format!("layer {index} ({})", names[index]),
                            "flat logits with at least 2 classes",
                            format!("{cur:?}"),
                        ));
                    }
                    cur
                }
            };
            out.push(LayerShape {
                index,
                name: names[index].clone(),
                kind: kind.clone(),
                input: cur,
                output: next,
            });
            cur = next;
        }
        Ok(out)
    }

    /// Checks structural invariants: shapes infer end to end and exactly one
    /// softmax-NLL layer terminates the stack.
    pub fn validate(&self) -> Result<()> {
        let softmaxes = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerKind::SoftmaxNll))
            .count();
        if softmaxes != 1 || !matches!(self.layers.last(), Some(LayerKind::SoftmaxNll)) {
            return Err(Error::Config(format!(
                "model {:?} must end with exactly one softmax layer",
                self.name
            )));
        }
        for l in &self.layers {
            if let LayerKind::Dropout { p } = l {
                crate::layers::check_dropout_p(*p)?;
            }
        }
        self.infer_shapes().map(|_| ())
    }

    pub fn num_classes(&self) -> Result<usize> {
        let shapes = self.infer_shapes()?;
        Ok(shapes.last().map(|s| s.output[0]).unwrap_or(0))
    }

    /// Parameter shapes for each parameterized layer, in layer order.
    pub fn param_shapes(&self) -> Result<Vec<ParamShape>> {
        Ok(self
            .infer_shapes()?
            .into_iter()
            .filter_map(|s| match s.kind {
                LayerKind::Conv3x3 { out_maps, bias } => Some(ParamShape {
                    layer: s.index,
                    weights: [out_maps, s.input[0], 3, 3],
                    bias: conv_bias_len(bias, out_maps, s.output[1], s.output[2]),
                }),
                LayerKind::FullyConnected { out_units } => Some(ParamShape {
                    layer: s.index,
                    weights: [s.input.iter().product(), out_units, 1, 1],
                    bias: out_units,
                }),
                _ => None,
            })
            .collect())
    }

    /// Total parameter count, or the count of the final `last_k` parameterized layers.
    pub fn count_params(&self, last_k: Option<usize>) -> Result<usize> {
        let shapes = self.param_shapes()?;
        let k = last_k.unwrap_or(shapes.len());
        if k > shapes.len() {
            return Err(Error::Config(format!(
                "last_k = {k} exceeds the {} parameterized layers of {:?}",
                shapes.len(),
                self.name
            )));
        }
        Ok(shapes[shapes.len() - k..]
            .iter()
            .map(ParamShape::count)
            .sum())
    }

    /// Layer indices of the final `k` parameterized layers.
    pub fn last_param_layers(&self, k: usize) -> Result<Vec<usize>> {
        let shapes = self.param_shapes()?;
        if k == 0 || k > shapes.len() {
            return Err(Error::Config(format!(
                "cannot select the last {k} of {} parameterized layers",
                shapes.len()
            )));
        }
        Ok(shapes[shapes.len() - k..].iter().map(|s| s.layer).collect())
    }
}

/// Weights and bias of one parameterized layer.
///
/// Conv weights are `[out, in, 3, 3]`; fully connected weights are `[in, out, 1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor<f32>,
    pub bias: Vec<f32>,
}

/// Parameters indexed by layer; `None` for layers without parameters.
pub type Params = Vec<Option<LayerParams>>;

/// Zero-filled parameters for `spec`.
pub fn zero_params(spec: &ModelSpec) -> Result<Params> {
    let mut params: Params = vec![None; spec.layers.len()];
    for s in spec.param_shapes()? {
        params[s.layer] = Some(LayerParams {
            weights: Tensor::zeros(s.weights),
            bias: vec![0.0; s.bias],
        });
    }
    Ok(params)
}

/// Fills the weights of the selected layers with i.i.d. draws from the open
/// interval given by `scheme` and zeroes their biases. Layers are visited in
/// order, so the draws depend only on the seed and the selected shapes.
pub fn init_layers(params: &mut Params, layers: &[usize], scheme: InitScheme, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &l in layers {
        if let Some(p) = params[l].as_mut() {
            let r = scheme.range(p.weights.shape());
            let dist = Uniform::new(-r, r);
            for w in p.weights.data_mut() {
                // the lower end of the half-open range is excluded as well
                *w = loop {
                    let v = dist.sample(&mut rng);
                    if v > -r {
                        break v;
                    }
                };
            }
            p.bias.iter_mut().for_each(|b| *b = 0.0);
        }
    }
}

/// Training metadata stored alongside parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u32,
    pub train_err: f64,
    pub val_err: f64,
    pub seed: u64,
    /// Unix seconds; 0 when unstamped.
    pub created_at: u64,
}

/// A model description together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Params,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    /// Freshly initialised model: uniform weights, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Checkpoint> {
        spec.validate()?;
        let mut params = zero_params(&spec)?;
        let layers: Vec<usize> = (0..spec.layers.len()).collect();
        init_layers(&mut params, &layers, spec.init, seed);
        Ok(Checkpoint {
            spec,
            params,
            meta: CheckpointMeta {
                seed,
                ..Default::default()
            },
        })
    }

    /// Verifies that every parameter array matches the spec's inferred shapes.
    pub fn check_shapes(&self) -> Result<()> {
        self.spec.validate()?;
        if self.params.len() != self.spec.layers.len() {
            return Err(Error::Corrupt(format!(
                "{} parameter slots for {} layers",
                self.params.len(),
                self.spec.layers.len()
            )));
        }
        let shapes = self.spec.param_shapes()?;
        let expected: Vec<Option<&ParamShape>> = (0..self.spec.layers.len())
            .map(|l| shapes.iter().find(|s| s.layer == l))
            .collect();
        for (l, (slot, want)) in self.params.iter().zip(expected).enumerate() {
            match (slot, want) {
                (None, None) => {}
                (Some(p), Some(s)) if p.weights.shape() == s.weights && p.bias.len() == s.bias => {}
                _ => {
                    return Err(Error::Corrupt(format!(
                        "parameters of layer {l} do not match the model description"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weights.len() + p.bias.len())
            .sum()
    }
}

/// Convenience wrapper around [`Checkpoint::init`].
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<Checkpoint> {
    Checkpoint::init(spec.clone(), seed)
}

/// Per-parameter-group trainable flags.
///
/// Groups are ordered as (weights, bias) for each parameterized layer in layer order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    trainable: Vec<bool>,
    layers: Vec<usize>,
}

impl FreezeMask {
    pub fn all_trainable(spec: &ModelSpec) -> Result<FreezeMask> {
        let layers: Vec<usize> = spec.param_shapes()?.iter().map(|s| s.layer).collect();
        Ok(FreezeMask {
            trainable: vec![true; layers.len() * 2],
            layers,
        })
    }

    /// Only the final `k` parameterized layers are trainable.
    pub fn last_k(spec: &ModelSpec, k: usize) -> Result<FreezeMask> {
        let tail = spec.last_param_layers(k)?;
        let mut mask = FreezeMask::all_trainable(spec)?;
        for (i, l) in mask.layers.clone().into_iter().enumerate() {
            let on = tail.contains(&l);
            mask.trainable[2 * i] = on;
            mask.trainable[2 * i + 1] = on;
        }
        Ok(mask)
    }

    pub fn groups(&self) -> &[bool] {
        &self.trainable
    }

    pub fn set_group(&mut self, group: usize, trainable: bool) {
        self.trainable[group] = trainable;
    }

    pub fn any_trainable(&self) -> bool {
        self.trainable.iter().any(|&t| t)
    }

    /// (weights trainable, bias trainable) for a layer index.
    pub fn layer(&self, layer: usize) -> (bool, bool) {
        match self.layers.iter().position(|&l| l == layer) {
            Some(i) => (self.trainable[2 * i], self.trainable[2 * i + 1]),
            None => (false, false),
        }
    }

    /// Index of the first layer with any trainable parameter.
    pub fn first_trainable_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .enumerate()
            .find(|(i, _)| self.trainable[2 * i] || self.trainable[2 * i + 1])
            .map(|(_, &l)| l)
    }

    pub fn trainable_count(&self, spec: &ModelSpec) -> Result<usize> {
        let shapes = spec.param_shapes()?;
        Ok(shapes
            .iter()
            .map(|s| {
                let (w, b) = self.layer(s.layer);
                let mut n = 0;
                if w {
                    n += s.weights.iter().product::<usize>();
                }
                if b {
                    n += s.bias;
                }
                n
            })
            .sum())
    }
}
