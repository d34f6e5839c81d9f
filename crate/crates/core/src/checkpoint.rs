//! Named-tensor archive used for checkpoints and external embedder weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"XMODALAR"            8-byte magic
//! version: u32           currently 1
//! header_len: u64
//! header: JSON           {"kind", "meta", "tensors": [{"name", "len"}, ...]}
//! data: f64 * sum(len)   tensors in header order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use xmodal_nn::ConvParams;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"XMODALAR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<f64>)>,
}

fn err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, data: Vec<f64>) {
        self.tensors.push((name.into(), data));
    }

    /// Append `prefix.<name>.weight` / `.bias` for each parameter group.
    pub fn push_params<'a>(
        &mut self,
        prefix: &str,
        names: &[String],
        params: impl IntoIterator<Item = &'a ConvParams>,
    ) {
        for (name, p) in names.iter().zip(params) {
            self.push(format!("{prefix}.{name}.weight"), p.weight.clone());
            self.push(format!("{prefix}.{name}.bias"), p.bias.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
    }

    /// Inverse of [`Archive::push_params`].
    pub fn take_params(&self, prefix: &str, names: &[String]) -> Result<Vec<ConvParams>> {
        names
            .iter()
            .map(|name| {
                let get = |part: &str| {
                    let key = format!("{prefix}.{name}.{part}");
                    self.get(&key)
                        .map(<[f64]>::to_vec)
                        .ok_or_else(|| Error::Checkpoint {
                            path: "<archive>".into(),
                            message: format!("missing tensor `{key}`"),
                        })
                };
                Ok(ConvParams {
                    weight: get("weight")?,
                    bias: get("bias")?,
                })
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, d)| TensorEntry {
                    name: name.clone(),
                    len: d.len(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let total: usize = self.tensors.iter().map(|(_, d)| d.len()).sum();
        let mut buf = Vec::with_capacity(8 + 4 + 8 + header.len() + 8 * total);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for (_, d) in &self.tensors {
            for v in d {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        // write-then-rename so a crash never leaves a truncated checkpoint
        let tmp = path.with_extension("partial");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err(path, "not an archive (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(err(path, format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| err(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| err(path, format!("bad header: {e}")))?;
        let total: usize = header.tensors.iter().map(|t| t.len).sum();
        if bytes.len() - header_end != total * 8 {
            return Err(err(
                path,
                format!(
                    "expected {} data bytes, found {}",
                    total * 8,
                    bytes.len() - header_end
                ),
            ));
        }
        let mut offset = header_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let data = bytes[offset..offset + 8 * t.len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += 8 * t.len;
            tensors.push((t.name, data));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Archive::new("test", serde_json::json!({"x": 1}));
        a.push("w", vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]);
        a.push("empty", vec![]);
        let p = dir.path().join("a.bin");
        a.save(&p).unwrap();
        let b = Archive::load(&p).unwrap();
        assert_eq!(b.kind, "test");
        assert_eq!(b.meta, a.meta);
        for ((_, x), (_, y)) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(
                x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, b"hello world, not an archive").unwrap();
        assert!(matches!(Archive::load(&p), Err(Error::Checkpoint { .. })));
        let mut a = Archive::new("t", serde_json::Value::Null);
        a.push("w", vec![1.0, 2.0]);
        a.save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, bytes).unwrap();
        assert!(Archive::load(&p).is_err());
    }
}
