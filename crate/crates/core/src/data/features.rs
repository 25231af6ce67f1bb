//! Feature files produced by an external extractor.
//!
//! ```text
//! SWFT1 <n> <d>\n
//! n rows × d little-endian f32
//! n lines of "<id>,<label>\n"
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::data::Dataset;
use crate::error::{Error, Result};

const TAG: &str = "SWFT1";

/// `rows × dim` features with row-aligned ids and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f32>, ids: Vec<String>, labels: Vec<usize>) -> Result<Self> {
        let rows = ids.len();
        if labels.len() != rows || data.len() != rows * dim {
            return Err(Error::Format(format!(
                "{rows} ids, {} labels and {} values do not form rows of dimension {dim}",
                labels.len(),
                data.len()
            )));
        }
        let fm = FeatureMatrix {
            rows,
            dim,
            data,
            ids,
            labels,
        };
        fm.check_ids()?;
        Ok(fm)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in &self.ids {
            if id.is_empty() || id.contains([',', '\n', '\r']) {
                return Err(Error::Format(format!(
                    "feature row id {id:?} is empty or contains a separator"
                )));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::Format(format!("duplicate feature row id {id:?}")));
            }
        }
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Views the rows as `(d, 1, 1)` items.
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            item_shape: [self.dim, 1, 1],
            inputs: self.data.clone(),
            labels: self.labels.clone(),
            ids: self.ids.clone(),
        }
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        FeatureMatrix::new(
            ds.item_len(),
            ds.inputs.clone(),
            ds.ids.clone(),
            ds.labels.clone(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_ids()?;
        let mut buf = format!("{TAG} {} {}\n", self.rows, self.dim).into_bytes();
        buf.reserve(self.data.len() * 4 + self.rows * 16);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for (id, label) in self.ids.iter().zip(&self.labels) {
            buf.extend_from_slice(format!("{id},{label}\n").as_bytes());
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("feature file has no header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Format("feature file header is not text".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != TAG {
            return Err(Error::Format(format!(
                "expected header `{TAG} n d`, found {header:?}"
            )));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad count {s:?} in feature header")))
        };
        let (rows, dim) = (parse(parts[1])?, parse(parts[2])?);
        let body = &bytes[nl + 1..];
        let n_bytes = rows
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format("feature header counts overflow".into()))?;
        if body.len() < n_bytes {
            return Err(Error::Format(format!(
                "header declares {rows} rows of {dim} values but the file is too short"
            )));
        }
        let data: Vec<f32> = body[..n_bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let trailer = std::str::from_utf8(&body[n_bytes..]).map_err(|_| {
            Error::Format("feature trailer is not text; row count or dimension mismatch".into())
        })?;
        let lines: Vec<&str> = trailer.lines().collect();
        if lines.len() != rows {
            return Err(Error::Format(format!(
                "header declares {rows} rows but the trailer lists {}",
                lines.len()
            )));
        }
        let mut ids = Vec::with_capacity(rows);
        let mut labels = Vec::with_capacity(rows);
        for line in lines {
            let (id, label) = line
                .rsplit_once(',')
                .ok_or_else(|| Error::Format(format!("trailer line {line:?} is not `id,label`")))?;
            ids.push(id.to_string());
            labels.push(
                label
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("bad label in trailer line {line:?}")))?,
            );
        }
        FeatureMatrix::new(dim, data, ids, labels)
    }
}

pub fn export_features(fm: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &fm.to_bytes()?)
}

pub fn import_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    FeatureMatrix::from_bytes(&std::fs::read(path)?)
}
