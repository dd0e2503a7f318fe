//! Flat binary tensor container shared by encoder weight files and
//! checkpoints.
//!
//! Layout: 8-byte magic `GDTENSOR`, `u32` format version, `u64` header
//! length, a JSON header, then the concatenated little-endian tensor data.
//! The header lists `(name, shape, dtype, offset, nbytes)` for every tensor
//! in file order, a SHA-256 of the data section, and free-form metadata.

use std::fs;
use std::path::Path;

use geodiffussr_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 8] = b"GDTENSOR";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    data_checksum: String,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    entries: Vec<TensorEntry>,
    data: Vec<u8>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let d: [u8; 32] = Sha256::digest(bytes).into();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, entries: Vec::new(), data: Vec::new() }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let offset = self.data.len();
        for &v in t.data() {
            v.write_le(&mut self.data);
        }
        self.entries.push(TensorEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            dtype: T::NAME.to_string(),
            offset,
            nbytes: self.data.len() - offset,
        });
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Weights(format!("tensor `{name}` not present")))?;
        if e.dtype != T::NAME {
            return Err(Error::Weights(format!("tensor `{name}` has dtype {}, expected {}", e.dtype, T::NAME)));
        }
        let bytes = &self.data[e.offset..e.offset + e.nbytes];
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Tensor::from_vec(e.shape.clone(), data)?)
    }

    pub fn data_checksum(&self) -> String {
        sha256_hex(&self.data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            tensors: self.entries.clone(),
            data_checksum: self.data_checksum(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    /// Parse and validate. A short data section reports the first tensor
    /// whose byte range is not fully present.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Weights("not a tensor container (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Weights(format!("unsupported container version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(Error::Weights("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let data = &body[hlen..];
        let mut expected_offset = 0;
        for e in &header.tensors {
            let elem = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(Error::Weights(format!("tensor `{}`: unknown dtype {other}", e.name))),
            };
            let numel: usize = e.shape.iter().product();
            if e.nbytes != numel * elem || e.offset != expected_offset {
                return Err(Error::Weights(format!("tensor `{}`: manifest entry inconsistent", e.name)));
            }
            if e.offset + e.nbytes > data.len() {
                return Err(Error::Weights(format!("tensor `{}`: data truncated", e.name)));
            }
            expected_offset += e.nbytes;
        }
        if expected_offset != data.len() {
            return Err(Error::Weights(format!(
                "data section has {} bytes, manifest describes {expected_offset}",
                data.len()
            )));
        }
        let c = Self { meta: header.meta, entries: header.tensors, data: data.to_vec() };
        if c.data_checksum() != header.data_checksum {
            return Err(Error::Weights("data checksum mismatch".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}
