//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "LIKENET\0"
//! version    u32
//! spec_len   u32, followed by the model description as UTF-8 JSON
//! meta       epoch u32, train_err f64, val_err f64, seed u64, created_at u64
//! per parameterized layer, in layer order:
//!            weight count u64, weights f32 × count,
//!            bias count u64, bias f32 × count
//! ```
//!
//! Nothing may follow the last array.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Checkpoint, CheckpointMeta, LayerParams, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LIKENET\0";
pub const FORMAT_VERSION: u32 = 1;

/// Serializes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.check_shapes()?;
    let spec = serde_json::to_vec(&ckpt.spec)
        .map_err(|e| Error::Format(format!("cannot encode model description: {e}")))?;
    let mut buf = Vec::with_capacity(64 + spec.len() + ckpt.num_params() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec);
    let m = &ckpt.meta;
    buf.extend_from_slice(&m.epoch.to_le_bytes());
    buf.extend_from_slice(&m.train_err.to_le_bytes());
    buf.extend_from_slice(&m.val_err.to_le_bytes());
    buf.extend_from_slice(&m.seed.to_le_bytes());
    buf.extend_from_slice(&m.created_at.to_le_bytes());
    for p in ckpt.params.iter().flatten() {
        write_array(&mut buf, p.weights.data());
        write_array(&mut buf, &p.bias);
    }
    Ok(buf)
}

fn write_array(buf: &mut Vec<u8>, values: &[f32]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "file truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn array(&mut self, expected: usize, what: &str) -> Result<Vec<f32>> {
        let n = self.u64(what)?;
        if n != expected as u64 {
            return Err(Error::Corrupt(format!(
                "{what}: {n} values stored, model description requires {expected}"
            )));
        }
        let raw = self.take(expected * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses checkpoint bytes, validating every array against the embedded description.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r
        .take(MAGIC.len(), "magic")
        .map_err(|_| Error::Format("not a checkpoint file (too short for magic bytes)".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(
            "not a checkpoint file (bad magic bytes)".into(),
        ));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let spec_len = r.u32("description length")? as usize;
    let spec_bytes = r.take(spec_len, "model description")?;
    let spec: ModelSpec = serde_json::from_slice(spec_bytes)
        .map_err(|e| Error::Corrupt(format!("unreadable model description: {e}")))?;
    spec.validate()
        .map_err(|e| Error::Corrupt(format!("embedded model description is invalid: {e}")))?;
    let meta = CheckpointMeta {
        epoch: r.u32("metadata")?,
        train_err: r.f64("metadata")?,
        val_err: r.f64("metadata")?,
        seed: r.u64("metadata")?,
        created_at: r.u64("metadata")?,
    };
    let mut params = vec![None; spec.layers.len()];
    for s in spec.param_shapes()? {
        let what = format!("layer {} weights", s.layer);
        let w = r.array(s.weights.iter().product(), &what)?;
        let b = r.array(s.bias, &format!("layer {} bias", s.layer))?;
        params[s.layer] = Some(LayerParams {
            weights: Tensor::from_vec(s.weights, w)?,
            bias: b,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} unexpected trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let ckpt = Checkpoint { spec, params, meta };
    ckpt.check_shapes()?;
    Ok(ckpt)
}

/// Writes atomically: the data goes to a sibling temporary file that is then renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(ckpt)?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Writes through a temporary sibling and a rename, so readers see the old or the new file, never a prefix.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Preset, PresetOptions};

    fn small() -> Checkpoint {
        let spec = Preset::Attractiveness.spec_with(PresetOptions {
            input_side: 64,
            width_divisor: 1,
        });
        let mut c = init_params(&spec, 4).unwrap();
        c.meta.epoch = 7;
        c.meta.val_err = 0.125;
        c
    }

    #[test]
    fn roundtrip_full_attractiveness_is_bitwise() {
        let ck = init_params(&Preset::Attractiveness.spec(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.spec, ck.spec);
        for (a, b) in back.params.iter().flatten().zip(ck.params.iter().flatten()) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.weights.data()), bits(b.weights.data()));
            assert_eq!(bits(&a.bias), bits(&b.bias));
        }
    }

    #[test]
    fn truncated_file_is_corruption() {
        let bytes = encode(&small()).unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 30] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(Error::Corrupt(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn newer_version_names_both_versions() {
        let mut bytes = encode(&small()).unwrap();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(
            err,
            Error::Version {
                found: 2,
                expected: 1
            }
        ));
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('1'));
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let mut bytes = encode(&small()).unwrap();
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode(b"LIK"), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_in_payload_is_corruption() {
        let ck = small();
        let mut bytes = encode(&ck).unwrap();
        // corrupt the first weight count
        let spec_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let first = 16 + spec_len + 36;
        bytes[first..first + 8].copy_from_slice(&5u64.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Corrupt(_))));
    }
}
