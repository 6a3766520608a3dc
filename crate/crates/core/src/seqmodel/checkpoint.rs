//! Versioned checkpoint files.
//!
//! Layout: the 8-byte magic `IATCKPT1`, a little-endian `u64` header length,
//! a JSON header (config, tensor names, shapes, dtype, byte offsets), then
//! every tensor as raw little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, Parameters, Tensor};
use super::Model;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IATCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE: &str = "f64";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(params: &Parameters, config: &ModelConfig, path: &Path) -> Result<()> {
    params.check_shapes(config)?;
    let mut offset = 0;
    let mut entries = Vec::new();
    for (name, t) in params.tensors() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len() * 8;
    }
    let header = serde_json::to_vec(&Header {
        format_version: CHECKPOINT_VERSION,
        config: config.clone(),
        dtype: DTYPE.to_string(),
        tensors: entries,
    })?;
    let mut buf = Vec::with_capacity(16 + header.len() + offset);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in params.tensors() {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Parameters, ModelConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<(Parameters, ModelConfig)> {
    let corrupt = |msg: &str| Error::CorruptCheckpoint(msg.to_string());
    if bytes.len() < 16 {
        return Err(corrupt("file too short"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        if &bytes[..7] == &CHECKPOINT_MAGIC[..7] {
            return Err(Error::CheckpointVersion(String::from_utf8_lossy(&bytes[..8]).into_owned()));
        }
        return Err(corrupt("bad magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion(format!("format_version {}", header.format_version)));
    }
    if header.dtype != DTYPE {
        return Err(corrupt(&format!("unsupported dtype {}", header.dtype)));
    }
    let config = header.config;
    config.validate().map_err(|e| corrupt(&e.to_string()))?;
    let payload = &bytes[payload_start..];

    let mut params = Parameters::zeros(&config);
    if header.tensors.len() != params.tensors().len() {
        return Err(corrupt("unexpected tensor count"));
    }
    for ((name, slot), entry) in params.tensors_mut().into_iter().zip(&header.tensors) {
        if entry.name != name {
            return Err(corrupt(&format!("expected tensor `{name}`, found `{}`", entry.name)));
        }
        if entry.shape != slot.shape() {
            return Err(Error::ShapeMismatch {
                tensor: name.to_string(),
                expected: slot.shape().to_vec(),
                found: entry.shape.clone(),
            });
        }
        if entry.len != slot.len() {
            return Err(corrupt(&format!("length of `{name}` disagrees with its shape")));
        }
        let end = entry
            .len
            .checked_mul(8)
            .and_then(|n| n.checked_add(entry.offset))
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| corrupt("truncated payload"))?;
        let data = payload[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *slot = Tensor::from_vec(&entry.shape, data)?;
    }
    Ok((params, config))
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(self.params(), self.config(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, config) = load_checkpoint(path)?;
        Model::new(config, params)
    }

    /// Loads weights into an existing model, keeping its config. Fails with
    /// a shape error if the file was written for different dimensions.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let (params, _) = load_checkpoint(path)?;
        self.set_params(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::ModelRole;

    fn sample() -> Model {
        Model::random(ModelConfig::new(9, 3, 5).with_role(ModelRole::Backward), 17).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = sample();
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.config().role, ModelRole::Backward);
        for ((_, a), (_, b)) in back.params().tensors().into_iter().zip(m.params().tensors()) {
            let a: Vec<u64> = a.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(&fs::read(&path).unwrap()[..8], b"IATCKPT1");
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample().save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [4, 20, bytes.len() - 3] {
            fs::write(&path, &bytes[..cut]).unwrap();
            let err = Model::load(&path).unwrap_err();
            assert!(matches!(err, Error::CorruptCheckpoint(_)), "{err}");
            assert!(err.to_string().starts_with("corrupt checkpoint"));
        }
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample().save(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[7] = b'9';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::CheckpointVersion(_))));
    }

    #[test]
    fn loading_into_other_dimensions_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        sample().save(&path).unwrap();
        let mut other = Model::random(ModelConfig::new(9, 3, 6), 1).unwrap();
        assert!(matches!(other.load_into(&path), Err(Error::ShapeMismatch { .. })));
        let mut same = Model::random(ModelConfig::new(9, 3, 5), 1).unwrap();
        same.load_into(&path).unwrap();
        assert_eq!(same.params(), sample().params());
    }
}
