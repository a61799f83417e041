//! Versioned model checkpoints: a JSON header (configs, label set, tensor
//! directory) followed by the named tensors as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::LabelSet;
use crate::datastore::Reader;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RRLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub model: Model<S>,
    /// Digest of the training configuration that produced the weights.
    pub train_digest: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    labels: Vec<String>,
    train_digest: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Hex SHA-256 of arbitrary bytes; used to tie artifacts to their inputs.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = &self.model;
        let header = Header {
            model: model.config,
            labels: model.label_set.names().to_vec(),
            train_digest: self.train_digest.clone(),
            tensors: model
                .params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in model.params.iter() {
            for &v in p.tensor.data() {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(r.err("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| r.err(&format!("bad header: {e}")))?;
        let label_set = LabelSet::new(header.labels)?;
        // the layout follows from the config; seed is irrelevant once overwritten
        let mut model = Model::new(header.model, label_set, 0)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            if model.params.id_of(&entry.name).is_none() {
                return Err(r.err(&format!("unknown tensor name {:?}", entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.err("size overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        model.load_tensors(tensors).map_err(|e| r.err(&e.to_string()))?;
        Ok(Self {
            model,
            train_digest: header.train_digest,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Loads and checks the label set against `expected`.
    pub fn load_for(path: impl AsRef<Path>, expected: &LabelSet) -> Result<Self> {
        let ckpt = Self::load(path)?;
        expected.ensure_same(&ckpt.model.label_set)?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::featurizer::HasherConfig;

    fn ckpt() -> Checkpoint<f64> {
        let cfg = ModelConfig {
            hasher: HasherConfig {
                hash_buckets: 32,
                embed_dim: 4,
                ..HasherConfig::default()
            },
            encoder: EncoderConfig {
                h_tok: 3,
                attn_dim: 3,
                h_sent: 3,
                ..EncoderConfig::default()
            },
            prototypes_per_label: 1,
        };
        Checkpoint {
            model: Model::new(cfg, LabelSet::new(["A", "B", "C"]).unwrap(), 4).unwrap(),
            train_digest: "d".into(),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = ckpt();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_bytes(&bytes, "mem").unwrap();
        for (a, b) in c.model.params.iter().zip(back.model.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor, b.tensor);
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = ckpt().to_bytes().unwrap();
        let mut v = bytes.clone();
        v[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&v, "m"),
            Err(Error::Version { found: 7, expected: 1 })
        ));
        let short = Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3], "m").unwrap_err();
        assert!(short.to_string().contains("truncated"), "{short}");
        let renamed = Checkpoint::<f64>::from_bytes(&lossless_replace(&bytes, b"\"proj\"", b"\"prjj\""), "m");
        assert!(renamed.unwrap_err().to_string().contains("unknown tensor name"));
    }

    fn lossless_replace(bytes: &[u8], from: &[u8], to: &[u8]) -> Vec<u8> {
        let pos = bytes.windows(from.len()).position(|w| w == from).unwrap();
        let mut out = bytes.to_vec();
        out[pos..pos + to.len()].copy_from_slice(to);
        out
    }

    #[test]
    fn label_set_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        ckpt().save(&path).unwrap();
        assert!(Checkpoint::<f64>::load_for(&path, &LabelSet::new(["A", "B", "C"]).unwrap()).is_ok());
        let err = Checkpoint::<f64>::load_for(&path, &LabelSet::new(["B", "A", "C"]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::LabelSetMismatch { .. }));
    }
}
