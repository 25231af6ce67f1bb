//! Training-set mean image: the only input preprocessing step.

use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::data::Dataset;
use crate::error::{Error, Result};

const MEAN_TAG: &str = "LIKEMEAN1";

/// Per-pixel, per-channel mean over the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanImage {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

/// Mean of every training item, accumulated in `f64`.
pub fn compute_mean(train: &Dataset) -> Result<MeanImage> {
    if train.is_empty() {
        return Err(Error::Data(
            "cannot compute a mean over an empty training split".into(),
        ));
    }
    let d = train.item_len();
    let mut acc = vec![0.0f64; d];
    for i in 0..train.len() {
        for (a, &v) in acc.iter_mut().zip(train.item(i)) {
            *a += v as f64;
        }
    }
    let n = train.len() as f64;
    let data: Vec<f32> = acc.iter().map(|a| (a / n) as f32).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("training mean is not finite".into()));
    }
    Ok(MeanImage {
        shape: train.item_shape,
        data,
    })
}

/// Subtracts the mean from every item of `ds`.
pub fn apply_mean(ds: &mut Dataset, mean: &MeanImage) -> Result<()> {
    if ds.item_shape != mean.shape {
        return Err(Error::shape(
            "mean subtraction",
            format!("{:?}", mean.shape),
            format!("{:?}", ds.item_shape),
        ));
    }
    if ds.is_empty() {
        return Ok(());
    }
    for chunk in ds.inputs.chunks_mut(mean.data.len()) {
        subtract(chunk, mean);
    }
    Ok(())
}

pub(crate) fn subtract(item: &mut [f32], mean: &MeanImage) {
    for (v, &m) in item.iter_mut().zip(&mean.data) {
        *v -= m;
    }
}

impl MeanImage {
    /// Subtracts the mean from a single `(C,H,W)` item in place.
    pub fn apply_to(&self, item: &mut [f32]) -> Result<()> {
        if item.len() != self.data.len() {
            return Err(Error::shape(
                "mean subtraction",
                self.data.len(),
                item.len(),
            ));
        }
        subtract(item, self);
        Ok(())
    }

    /// File layout: text line `LIKEMEAN1 c h w`, then `c·h·w` little-endian f32 values.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let [c, h, w] = self.shape;
        let mut buf = format!("{MEAN_TAG} {c} {h} {w}\n").into_bytes();
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_atomic(path.as_ref(), &buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MeanImage> {
        let bytes = std::fs::read(path)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("mean image file has no header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Format("mean image header is not text".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != MEAN_TAG {
            return Err(Error::Format(format!("bad mean image header {header:?}")));
        }
        let dims: Vec<usize> = parts[1..]
            .iter()
            .map(|p| {
                p.parse()
                    .map_err(|_| Error::Format(format!("bad extent {p:?}")))
            })
            .collect::<Result<_>>()?;
        let shape = [dims[0], dims[1], dims[2]];
        let body = &bytes[nl + 1..];
        if body.len() != shape.iter().product::<usize>() * 4 {
            return Err(Error::Format(format!(
                "mean image body holds {} bytes, header requires {}",
                body.len(),
                shape.iter().product::<usize>() * 4
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(MeanImage { shape, data })
    }
}
