//! Dataset ingestion: manifests, image decoding, mean-image preprocessing,
//! synthetic data and externally extracted feature files.

pub mod features;
pub mod image;
pub mod manifest;
pub mod mean;
pub mod synth;

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use self::features::{export_features, import_features, FeatureMatrix};
pub use self::image::{load_image, resize_bilinear};
pub use self::manifest::{audit_sample, split, Category, CategoryCounts, Entry, Manifest, Split};
pub use self::mean::{apply_mean, compute_mean, MeanImage};
pub use self::synth::{
    synth_generate, synth_generate_with, synth_sample, SynthDataset, SynthOptions,
};

/// Labelled examples held in memory, each of shape `item_shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub item_shape: [usize; 3],
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl Dataset {
    pub fn new(item_shape: [usize; 3]) -> Self {
        Dataset {
            item_shape,
            inputs: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
        }
    }

    pub fn from_parts(
        item_shape: [usize; 3],
        inputs: Vec<f32>,
        labels: Vec<usize>,
        ids: Vec<String>,
    ) -> Result<Self> {
        let item: usize = item_shape.iter().product();
        if labels.len() != ids.len() || inputs.len() != item * labels.len() {
            return Err(Error::Data(format!(
                "dataset parts disagree: {} values, {} labels, {} ids for items of {item}",
                inputs.len(),
                labels.len(),
                ids.len()
            )));
        }
        Ok(Dataset {
            item_shape,
            inputs,
            labels,
            ids,
        })
    }

    pub fn item_len(&self) -> usize {
        self.item_shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let d = self.item_len();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn push(&mut self, id: impl Into<String>, values: &[f32], label: usize) -> Result<()> {
        if values.len() != self.item_len() {
            return Err(Error::shape("dataset item", self.item_len(), values.len()));
        }
        self.inputs.extend_from_slice(values);
        self.labels.push(label);
        self.ids.push(id.into());
        Ok(())
    }

    /// Gathers the given items into a batch tensor plus their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let d = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        let [c, h, w] = self.item_shape;
        let t = Tensor::from_vec([indices.len(), c, h, w], data).expect("batch size matches");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (t, labels) = self.batch(indices);
        Dataset {
            item_shape: self.item_shape,
            inputs: t.into_vec(),
            labels,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// Fraction of examples with label 1.
    pub fn positive_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&l| l == 1).count() as f64 / self.len() as f64
    }
}

/// Decodes the labelled entries of one split at `side`×`side`, in manifest order.
///
/// Relative paths resolve against `base`. Unlabelled entries are skipped.
pub fn load_split(manifest: &Manifest, split: Split, side: usize, base: &Path) -> Result<Dataset> {
    let mut ds = Dataset::new([3, side, side]);
    let mut skipped = 0usize;
    for e in manifest.in_split(split) {
        let Some(label) = e.label else {
            skipped += 1;
            continue;
        };
        let img = load_image(base.join(&e.path), side)?;
        ds.push(e.id.clone(), img.data(), label as usize)?;
    }
    if skipped > 0 {
        log::warn!("{skipped} unlabelled {split} entries skipped");
    }
    Ok(ds)
}
