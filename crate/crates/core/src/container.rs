//! Binary tensor container used by every persisted artifact.
//!
//! Layout, bit-exact:
//!   bytes 0..8    magic (artifact kind)
//!   byte  8       version, 0x01
//!   bytes 9..13   header length, u32 little-endian
//!   header        UTF-8 JSON: {"config": ..., "tensors": [{"name","shape",
//!                 "dtype":"f32","offset"}, ...], "meta": ...}
//!   payload       raw little-endian f32 values, tensor after tensor
//!
//! Offsets are byte offsets into the payload. Values are quantized to
//! f32 on write and widened back to f64 on read.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MAGIC_CHECKPOINT: &[u8; 8] = b"ASYRPCKP";
pub const MAGIC_DIRECTION: &[u8; 8] = b"ASYRPDIR";
pub const MAGIC_EMBEDDER: &[u8; 8] = b"ASYRPEMB";
pub const MAGIC_DATASET: &[u8; 8] = b"ASYRPDAT";
pub const MAGIC_LATENTS: &[u8; 8] = b"ASYRPLAT";

pub const VERSION: u8 = 0x01;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    meta: serde_json::Value,
}

/// An in-memory container: a config document plus named tensors.
#[derive(Debug)]
pub struct Container {
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(config: serde_json::Value) -> Self {
        Container { config, meta: serde_json::Value::Null, entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }

    pub fn to_bytes(&self, magic: &'static [u8; 8]) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.entries.len());
        let mut offset = 0u64;
        for (name, t) in &self.entries {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".to_string(),
                offset,
            });
            offset += 4 * t.numel() as u64;
        }
        let header = Header {
            config: self.config.clone(),
            tensors,
            meta: self.meta.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut out =
            Vec::with_capacity(13 + header_bytes.len() + offset as usize);
        out.extend_from_slice(magic);
        out.push(VERSION);
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, t) in &self.entries {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn write(&self, magic: &'static [u8; 8], path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes(magic)?)?;
        Ok(())
    }

    pub fn from_bytes(magic: &'static [u8; 8], bytes: &[u8]) -> Result<Self> {
        let expected = std::str::from_utf8(magic).unwrap_or("????????");
        if bytes.len() < 13 {
            return Err(Error::Truncated("file shorter than fixed preamble".into()));
        }
        if &bytes[0..8] != magic {
            return Err(Error::BadMagic { expected });
        }
        if bytes[8] != VERSION {
            return Err(Error::Version(bytes[8]));
        }
        let header_len =
            u32::from_le_bytes([bytes[9], bytes[10], bytes[11], bytes[12]]) as usize;
        if bytes.len() < 13 + header_len {
            return Err(Error::Truncated(format!(
                "header claims {header_len} bytes, {} available",
                bytes.len() - 13
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[13..13 + header_len])
            .map_err(|e| Error::Header(e.to_string()))?;
        let payload = &bytes[13 + header_len..];
        let mut entries = Vec::with_capacity(header.tensors.len());
        for te in &header.tensors {
            if te.dtype != "f32" {
                return Err(Error::Header(format!("unsupported dtype {}", te.dtype)));
            }
            let numel: usize = te.shape.iter().product();
            let start = te.offset as usize;
            let end = start + 4 * numel;
            if end > payload.len() {
                return Err(Error::Truncated(format!(
                    "tensor {} needs payload bytes {start}..{end}, {} available",
                    te.name,
                    payload.len()
                )));
            }
            let mut data = Vec::with_capacity(numel);
            for chunk in payload[start..end].chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
            }
            entries.push((te.name.clone(), Tensor::new(te.shape.clone(), data)?));
        }
        Ok(Container { config: header.config, meta: header.meta, entries })
    }

    pub fn read(magic: &'static [u8; 8], path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(magic, &bytes)
    }
}

/// FNV-1a 64-bit hash; used for frozen-artifact identity checks.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample_container() -> Container {
        let mut rng = Rng::seed(9);
        let mut c = Container::new(serde_json::json!({"kind": "test", "n": 3}));
        c.push("a", Tensor::randn(&[2, 3], &mut rng));
        c.push("b", Tensor::randn(&[4], &mut rng));
        c
    }

    #[test]
    fn roundtrip_preserves_config_and_quantizes_to_f32() {
        let c = sample_container();
        let bytes = c.to_bytes(MAGIC_CHECKPOINT).unwrap();
        let back = Container::from_bytes(MAGIC_CHECKPOINT, &bytes).unwrap();
        assert_eq!(back.config, c.config);
        let quant = 2f64.powi(-23);
        for ((n0, t0), (n1, t1)) in c.entries().iter().zip(back.entries()) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (&a, &b) in t0.data().iter().zip(t1.data()) {
                assert!((a - b).abs() <= a.abs().max(1.0) * quant, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn bad_magic_is_distinct() {
        let c = sample_container();
        let mut bytes = c.to_bytes(MAGIC_CHECKPOINT).unwrap();
        bytes[0] = b'X';
        match Container::from_bytes(MAGIC_CHECKPOINT, &bytes) {
            Err(Error::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let c = sample_container();
        let mut bytes = c.to_bytes(MAGIC_CHECKPOINT).unwrap();
        bytes[8] = 0x7f;
        match Container::from_bytes(MAGIC_CHECKPOINT, &bytes) {
            Err(Error::Version(0x7f)) => {}
            other => panic!("expected Version, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_distinct() {
        let c = sample_container();
        let bytes = c.to_bytes(MAGIC_CHECKPOINT).unwrap();
        // cut into the payload: header stays valid, tensors do not fit
        let cut = &bytes[..bytes.len() - 5];
        match Container::from_bytes(MAGIC_CHECKPOINT, cut) {
            Err(Error::Truncated(_)) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn serialization_is_byte_stable() {
        let a = sample_container().to_bytes(MAGIC_DATASET).unwrap();
        let b = sample_container().to_bytes(MAGIC_DATASET).unwrap();
        assert_eq!(a, b);
        assert_eq!(fnv1a64(&a), fnv1a64(&b));
    }
}
