//! Synthetic stand-in for a private preference dataset.
//!
//! Each image is a filled, rotated ellipse of random size, eccentricity,
//! position and brightness drawn over a textured background. The true label
//! is 1 exactly when the ellipse covers more than [`AREA_THRESHOLD`] of the
//! image, and the observed label is the true label flipped with probability
//! `noise_rate`. Background pixels stay at or below [`BACKGROUND_MAX`] and
//! ellipse pixels at or above [`FOREGROUND_MIN`], so the true label is an
//! exact function of the pixels (see [`oracle_label`]).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Fraction of the image area above which the true label is 1.
pub const AREA_THRESHOLD: f64 = 0.075;
/// Probability that a sample is drawn from the large-ellipse population.
pub const LARGE_FRACTION: f64 = 0.53;
pub const BACKGROUND_MAX: f32 = 0.45;
pub const FOREGROUND_MIN: f32 = 0.55;

// Area fractions for the two populations; the gap around the threshold keeps
// rasterisation from moving a sample across it at moderate resolutions.
const SMALL_AREA: (f64, f64) = (0.025, 0.055);
const LARGE_AREA: (f64, f64) = (0.095, 0.22);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthOptions {
    pub side: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { side: 250 }
    }
}

/// One generated image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `(3, side, side)` values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub true_label: usize,
    pub observed_label: usize,
    /// Number of ellipse pixels.
    pub area_px: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    /// Images with their observed (possibly flipped) labels.
    pub dataset: Dataset,
    pub true_labels: Vec<usize>,
}

impl SynthDataset {
    pub fn flipped_fraction(&self) -> f64 {
        let flips = self
            .true_labels
            .iter()
            .zip(&self.dataset.labels)
            .filter(|(a, b)| a != b)
            .count();
        flips as f64 / self.true_labels.len().max(1) as f64
    }
}

/// Pixel-count threshold for a given side length.
pub fn threshold_px(side: usize) -> f64 {
    AREA_THRESHOLD * (side * side) as f64
}

/// Recovers the true label from pixels alone by counting foreground pixels.
pub fn oracle_label(pixels: &[f32], side: usize) -> usize {
    let plane = side * side;
    let area = (0..plane)
        .filter(|&i| (0..3).all(|c| pixels[c * plane + i] > 0.5))
        .count();
    usize::from(area as f64 > threshold_px(side))
}

/// Generates sample `index` of the stream identified by `seed`.
///
/// Each index has its own RNG stream, so samples can be produced in any order.
pub fn synth_sample(index: u64, noise_rate: f64, seed: u64, opts: SynthOptions) -> SynthSample {
    let s = opts.side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let large = rng.gen::<f64>() < LARGE_FRACTION;
    let (lo, hi) = if large { LARGE_AREA } else { SMALL_AREA };
    let frac = rng.gen_range(lo..hi);
    let aspect = rng.gen_range(0.5..1.0);
    let area = frac * (s * s) as f64;
    let a = (area / (PI * aspect)).sqrt();
    let b = a * aspect;
    let theta = rng.gen_range(0.0..PI);
    let margin = (a + 1.0).min(s as f64 / 2.0);
    let place = |rng: &mut ChaCha8Rng| {
        if s as f64 - margin > margin {
            rng.gen_range(margin..s as f64 - margin)
        } else {
            s as f64 / 2.0
        }
    };
    let cx = place(&mut rng);
    let cy = place(&mut rng);

    // background texture: base level, an oriented sinusoid, and pixel noise
    let base: f32 = rng.gen_range(0.05..0.2);
    let amp: f32 = rng.gen_range(0.02..0.1);
    let freq = rng.gen_range(0.05..0.4);
    let phi = rng.gen_range(0.0..PI);
    let bg_tint: [f32; 3] = [
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.7..1.0),
    ];
    let brightness: f32 = rng.gen_range(0.65..0.95);
    let fg_tint: [f32; 3] = [
        rng.gen_range(0.9..1.05),
        rng.gen_range(0.9..1.05),
        rng.gen_range(0.9..1.05),
    ];

    let (sin_t, cos_t) = theta.sin_cos();
    let plane = s * s;
    let mut pixels = vec![0.0f32; 3 * plane];
    let mut area_px = 0;
    for y in 0..s {
        for x in 0..s {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * cos_t + dy * sin_t) / a;
            let v = (-dx * sin_t + dy * cos_t) / b;
            let inside = u * u + v * v <= 1.0;
            let wave = ((x as f64 * phi.cos() + y as f64 * phi.sin()) * freq).sin() as f32;
            if inside {
                area_px += 1;
            }
            for c in 0..3 {
                let noise: f32 = rng.gen_range(-0.05..0.05);
                let value = if inside {
                    (brightness * fg_tint[c] + noise).clamp(FOREGROUND_MIN, 1.0)
                } else {
                    ((base + amp * wave) * bg_tint[c] + noise).clamp(0.0, BACKGROUND_MAX)
                };
                pixels[c * plane + y * s + x] = value;
            }
        }
    }
    let true_label = usize::from(area_px as f64 > threshold_px(s));
    let flip = rng.gen::<f64>() < noise_rate;
    SynthSample {
        pixels,
        true_label,
        observed_label: if flip { 1 - true_label } else { true_label },
        area_px,
    }
}

/// `n` samples at the full 250×250 resolution.
pub fn synth_generate(n: usize, noise_rate: f64, seed: u64) -> Result<SynthDataset> {
    synth_generate_with(n, noise_rate, seed, SynthOptions::default())
}

pub fn synth_generate_with(
    n: usize,
    noise_rate: f64,
    seed: u64,
    opts: SynthOptions,
) -> Result<SynthDataset> {
    if n == 0 {
        return Err(Error::Config(
            "synthetic dataset needs at least one sample".into(),
        ));
    }
    if !(0.0..0.5).contains(&noise_rate) {
        return Err(Error::Config(format!(
            "noise rate {noise_rate} outside [0, 0.5)"
        )));
    }
    if opts.side < 3 {
        return Err(Error::Config(format!(
            "synthetic side {} is too small",
            opts.side
        )));
    }
    let mut dataset = Dataset::new([3, opts.side, opts.side]);
    dataset.inputs.reserve(n * dataset.item_len());
    let mut true_labels = Vec::with_capacity(n);
    for i in 0..n {
        let s = synth_sample(i as u64, noise_rate, seed, opts);
        dataset.push(format!("synth{i:06}"), &s.pixels, s.observed_label)?;
        true_labels.push(s.true_label);
    }
    Ok(SynthDataset {
        dataset,
        true_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: SynthOptions = SynthOptions { side: 24 };

    #[test]
    fn no_noise_means_no_flips() {
        let d = synth_generate_with(300, 0.0, 1, SMALL).unwrap();
        assert_eq!(d.dataset.labels, d.true_labels);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate_with(20, 0.2, 7, SMALL).unwrap();
        let b = synth_generate_with(20, 0.2, 7, SMALL).unwrap();
        assert_eq!(a, b);
        let c = synth_generate_with(20, 0.2, 8, SMALL).unwrap();
        assert_ne!(a.dataset.inputs, c.dataset.inputs);
    }

    #[test]
    fn oracle_recovers_true_label() {
        let opts = SynthOptions { side: 64 };
        let d = synth_generate_with(200, 0.3, 2, opts).unwrap();
        for i in 0..d.dataset.len() {
            assert_eq!(oracle_label(d.dataset.item(i), 64), d.true_labels[i]);
        }
    }

    #[test]
    fn pixel_ranges() {
        let s = synth_sample(0, 0.0, 3, SynthOptions { side: 40 });
        assert!(s.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(s.area_px > 0);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(synth_generate_with(0, 0.1, 1, SMALL).is_err());
        assert!(synth_generate_with(10, 0.5, 1, SMALL).is_err());
        assert!(synth_generate_with(10, -0.1, 1, SMALL).is_err());
    }
}
