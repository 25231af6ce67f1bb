//! Brute-force reference implementations shared by the integration tests.
//!
//! Nothing here calls into the layer kernels or shape inference of the
//! library; each oracle walks the definition directly.

#![allow(dead_code)]

use likenet_core::layers::BiasMode;
use likenet_core::model::{LayerKind, ModelSpec};
use likenet_core::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Valid 3×3 cross-correlation, one multiply-add at a time.
pub fn conv_oracle(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    wt: &[f64],
    out_maps: usize,
    bias: &[f64],
    mode: BiasMode,
) -> Vec<f64> {
    let (oh, ow) = (h - 2, w - 2);
    let mut y = vec![0.0; n * out_maps * oh * ow];
    for b in 0..n {
        for o in 0..out_maps {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = match mode {
                        BiasMode::Tied => bias[o],
                        BiasMode::Untied => bias[(o * oh + i) * ow + j],
                    };
                    for ci in 0..c {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                acc += x[((b * c + ci) * h + i + ki) * w + j + kj]
                                    * wt[((o * c + ci) * 3 + ki) * 3 + kj];
                            }
                        }
                    }
                    y[((b * out_maps + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    y
}

/// 2×2 stride-2 max pooling where a trailing odd row or column forms a partial window.
pub fn pool_oracle(x: &[f64], [n, c, h, w]: [usize; 4]) -> (Vec<f64>, [usize; 4]) {
    let oh = h / 2 + h % 2;
    let ow = w / 2 + w % 2;
    let mut y = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for yy in 2 * i..(2 * i + 2).min(h) {
                    for xx in 2 * j..(2 * j + 2).min(w) {
                        m = m.max(x[plane * h * w + yy * w + xx]);
                    }
                }
                y.push(m);
            }
        }
    }
    (y, [n, c, oh, ow])
}

/// Counts parameters by visiting every weight and bias element of every
/// parameterized layer, with its own walk over spatial extents.
///
/// Returns one count per parameterized layer, in layer order.
pub fn enumerate_params(spec: &ModelSpec) -> Vec<u64> {
    let [mut c, mut h, mut w] = spec.input_shape;
    let mut counts = Vec::new();
    for layer in &spec.layers {
        match layer {
            LayerKind::Conv3x3 { out_maps, bias } => {
                let (oh, ow) = (h - 2, w - 2);
                let mut k = 0u64;
                for _o in 0..*out_maps {
                    for _i in 0..c {
                        for _tap in 0..9 {
                            k += 1;
                        }
                    }
                }
                match bias {
                    BiasMode::Tied => k += *out_maps as u64,
                    BiasMode::Untied => {
                        for _o in 0..*out_maps {
                            for _y in 0..oh {
                                for _x in 0..ow {
                                    k += 1;
                                }
                            }
                        }
                    }
                }
                counts.push(k);
                (c, h, w) = (*out_maps, oh, ow);
            }
            LayerKind::MaxPool2x2 => {
                h = (h + 1) / 2;
                w = (w + 1) / 2;
            }
            LayerKind::Flatten => {
                (c, h, w) = (c * h * w, 1, 1);
            }
            LayerKind::FullyConnected { out_units } => {
                let fan_in = c * h * w;
                let mut k = 0u64;
                for _i in 0..fan_in {
                    for _o in 0..*out_units {
                        k += 1;
                    }
                }
                for _o in 0..*out_units {
                    k += 1;
                }
                counts.push(k);
                (c, h, w) = (*out_units, 1, 1);
            }
            LayerKind::Relu | LayerKind::Dropout { .. } | LayerKind::SoftmaxNll => {}
        }
    }
    counts
}

/// Two isotropic Gaussian blobs centred at ±`sep`/2 along every axis.
pub fn blobs(n: usize, dim: usize, sep: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new([dim, 1, 1]);
    for i in 0..n {
        let y = i % 2;
        let centre = if y == 1 { sep / 2.0 } else { -sep / 2.0 };
        let row: Vec<f32> = (0..dim)
            .map(|_| (centre + gauss(&mut rng)) as f32)
            .collect();
        ds.push(format!("b{i}"), &row, y).unwrap();
    }
    ds
}

/// Standard normal draw via Box–Muller.
pub fn gauss(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
