//! The dataset manifest: one CSV row per image, `id,path,label,split,category`.
//!
//! An empty `label` field marks an entry that has not been labelled yet.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

/// Audit categories for how clearly an image shows its subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Clean,
    Unknown,
    Mixed,
    NoFace,
    PartialFace,
    Untagged,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Clean,
        Category::Unknown,
        Category::Mixed,
        Category::NoFace,
        Category::PartialFace,
        Category::Untagged,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Clean => "clean",
            Category::Unknown => "unknown",
            Category::Mixed => "mixed",
            Category::NoFace => "no_face",
            Category::PartialFace => "partial_face",
            Category::Untagged => "untagged",
        }
    }
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Split::Train, Split::Val, Split::Test, Split::Unassigned]
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown category {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub path: String,
    pub label: Option<u8>,
    pub split: Split,
    pub category: Category,
}

impl Entry {
    pub fn new(id: impl Into<String>, path: impl Into<String>) -> Self {
        Entry {
            id: id.into(),
            path: path.into(),
            label: None,
            split: Split::Unassigned,
            category: Category::Untagged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

/// Number of entries per audit category.
pub type CategoryCounts = BTreeMap<Category, usize>;

impl Manifest {
    pub fn new(entries: Vec<Entry>) -> Result<Self> {
        let m = Manifest { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.id.is_empty() {
                return Err(Error::Data("manifest entry with empty id".into()));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate manifest id {:?}", e.id)));
            }
            if let Some(l) = e.label {
                if l > 1 {
                    return Err(Error::Data(format!(
                        "entry {:?} has label {l}; labels are 0 or 1",
                        e.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Entry> {
        self.entries.iter_mut().find(|e| e.id == id)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn read_from(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Format(format!("manifest header: {e}")))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "path", "label", "split", "category"] {
            return Err(Error::Format(format!(
                "manifest header must be id,path,label,split,category (found {})",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries = Vec::new();
        for (line, row) in rdr.deserialize::<Entry>().enumerate() {
            entries
                .push(row.map_err(|e| Error::Format(format!("manifest row {}: {e}", line + 1)))?);
        }
        Manifest::new(entries)
    }

    pub fn write_to(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        if self.entries.is_empty() {
            w.write_record(["id", "path", "label", "split", "category"])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        for e in &self.entries {
            w.serialize(e).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())?;
        Manifest::read_from(std::io::BufReader::new(f))
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        write_atomic(path.as_ref(), &buf)
    }

    pub fn tally_categories(&self) -> CategoryCounts {
        tally(self.entries.iter())
    }

    /// Count of labelled entries and how many are labelled 1.
    pub fn label_counts(&self) -> (usize, usize) {
        let labelled = self.entries.iter().filter(|e| e.label.is_some()).count();
        let ones = self.entries.iter().filter(|e| e.label == Some(1)).count();
        (labelled, ones)
    }
}

pub fn tally<'a>(entries: impl IntoIterator<Item = &'a Entry>) -> CategoryCounts {
    let mut counts = CategoryCounts::new();
    for e in entries {
        *counts.entry(e.category).or_insert(0) += 1;
    }
    counts
}

/// Seeded train/val/test assignment.
///
/// A seeded permutation is taken; the first `round(n·r_val)` entries become
/// validation, the next `round(n·r_test)` test, and the rest training.
pub fn split(manifest: &Manifest, ratios: (f64, f64, f64), seed: u64) -> Result<Manifest> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(r.is_finite() && *r > 0.0))
        || ((tr + va + te) - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios ({tr}, {va}, {te}) must be positive and sum to 1"
        )));
    }
    let n = manifest.len();
    let n_val = (n as f64 * va).round() as usize;
    let n_test = (n as f64 * te).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = manifest.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.entries[i].split = if rank < n_val {
            Split::Val
        } else if rank < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
    }
    Ok(out)
}

/// Uniform sample of `n` entries without replacement, in sampled order.
pub fn audit_sample(manifest: &Manifest, n: usize, seed: u64) -> Result<Vec<Entry>> {
    if n > manifest.len() {
        return Err(Error::Config(format!(
            "cannot sample {n} entries from a manifest of {}",
            manifest.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, manifest.len(), n)
        .into_iter()
        .map(|i| manifest.entries[i].clone())
        .collect())
}
