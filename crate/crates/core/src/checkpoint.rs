//! Binary checkpoint files.
//!
//! Layout: an 8-byte little-endian header length, a JSON header listing
//! every tensor's key, shape and element offset plus free-form metadata,
//! then all tensor data as little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<Entry>,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(tensors: Vec<(String, Tensor)>, meta: serde_json::Value) -> Self {
        Self { tensors, meta }
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(k, _)| k == key).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (key, t) in &self.tensors {
            if entries.iter().any(|e: &Entry| &e.key == key) {
                return Err(Error::Checkpoint(format!("duplicate key `{key}`")));
            }
            entries.push(Entry {
                key: key.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = serde_json::to_vec(&Header {
            tensors: entries,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + 8 * offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Checkpoint(format!("truncated or corrupt file: {what}"));
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .ok_or_else(|| corrupt("no header length"))?
            .try_into()
            .unwrap();
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .ok_or_else(|| corrupt("header length"))?;
        let header: Header =
            serde_json::from_slice(bytes.get(8..header_end).ok_or_else(|| corrupt("header"))?)?;
        let body = &bytes[header_end..];
        if !body.len().is_multiple_of(8) {
            return Err(corrupt("data section is not a whole number of f64 values"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let data = values
                    .get(e.offset..e.offset + n)
                    .ok_or_else(|| corrupt(&format!("tensor `{}`", e.key)))?;
                Ok((e.key, Tensor::from_parts(e.shape, data.to_vec())?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tensors,
            meta: header.meta,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so an
    /// interrupted save never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = Checkpoint::new(
            vec![
                (
                    "a".into(),
                    Tensor::matrix(2, 2, vec![0.1, -1e-300, 3.5e200, 7.0]).unwrap(),
                ),
                ("tau".into(), Tensor::scalar(12.0)),
                ("empty".into(), Tensor::zeros(&[0])),
            ],
            serde_json::json!({"note": "x", "lr": 0.001}),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn truncation_is_detected() {
        let ck = Checkpoint::new(
            vec![("a".into(), Tensor::vector(vec![1.0, 2.0]))],
            serde_json::Value::Null,
        );
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..4]).is_err());
    }

    #[test]
    fn duplicate_keys_rejected() {
        let t = Tensor::scalar(1.0);
        let ck = Checkpoint::new(
            vec![("a".into(), t.clone()), ("a".into(), t)],
            serde_json::Value::Null,
        );
        assert!(ck.to_bytes().is_err());
    }
}
