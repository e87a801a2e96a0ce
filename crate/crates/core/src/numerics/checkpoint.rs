//! Binary checkpoint: `PAAG1`, a little-endian `u64` header length, a JSON
//! header holding a manifest (name, dtype, shape, byte offset) plus free-form
//! metadata, then raw little-endian float64 buffers.

use super::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use thiserror::Error;

pub const MAGIC: &[u8; 5] = b"PAAG1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a PAAG1 checkpoint")]
    BadMagic,
    #[error("malformed header: {0}")]
    Header(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    dtype: "f64".into(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self.manifest(),
        };
        let bytes = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(&bytes)?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut hbuf = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut hbuf)?;
        let header: Header = serde_json::from_slice(&hbuf).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.dtype != "f64" {
                return Err(CheckpointError::Header(format!("unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            let raw = rest
                .get(start..end)
                .ok_or_else(|| CheckpointError::Header(format!("buffer for {} out of range", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| CheckpointError::Header(err.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let ck = Checkpoint {
            meta: serde_json::json!({"variant": "PAAG"}),
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap()),
                ("b".into(), Tensor::scalar(std::f64::consts::PI)),
            ],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"PAAG1");
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.manifest()[1].offset, 32);
    }

    #[test]
    fn rejects_bad_magic() {
        let err = Checkpoint::read_from(&b"NOPE1xxxxxxxx"[..]).unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic));
    }
}
