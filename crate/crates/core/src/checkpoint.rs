//! Single-file tensor checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | offset   | size | content                                        |
//! |----------|------|------------------------------------------------|
//! | 0        | 8    | magic `DIACKPT\0`                              |
//! | 8        | 4    | `u32` format version (currently 1)             |
//! | 12       | 8    | `u64` manifest length `M` in bytes             |
//! | 20       | M    | UTF-8 JSON manifest                            |
//! | 20 + M   | ...  | payload: raw `f64` values, little-endian       |
//!
//! The manifest is `{"tensors": [{"name", "shape", "offset"}], "meta": {..}}`
//! where `offset` is the byte offset of the tensor inside the payload.
//! Tensors are written in name order, back to back, so identical contents
//! always produce identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DIACKPT\0";
pub const VERSION: u32 = 1;
const HEADER: usize = 20;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
    meta: BTreeMap<String, String>,
}

/// Named tensors plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::usage(format!("duplicate checkpoint entry `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::usage(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::usage(format!("checkpoint has no metadata `{key}`")))
    }

    /// Moves every entry of `other` into `self` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: Checkpoint) -> Result<()> {
        for (k, t) in other.tensors {
            self.insert(format!("{prefix}{k}"), t)?;
        }
        for (k, v) in other.meta {
            self.meta.insert(format!("{prefix}{k}"), v);
        }
        Ok(())
    }

    /// Entries under `prefix`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> Checkpoint {
        let strip = |k: &String| k.strip_prefix(prefix).map(str::to_string);
        Checkpoint {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, t)| strip(k).map(|k| (k, t.clone())))
                .collect(),
            meta: self
                .meta
                .iter()
                .filter_map(|(k, v)| strip(k).map(|k| (k, v.clone())))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.numel() as u64;
        }
        let manifest = serde_json::to_vec(&Manifest {
            tensors: entries,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(HEADER + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |have: usize, want: usize, what: &str| -> Result<()> {
            if have < want {
                Err(Error::Format {
                    offset: have as u64,
                    detail: format!("truncated {what}: missing {} bytes", want - have),
                })
            } else {
                Ok(())
            }
        };
        need(bytes.len(), HEADER, "header")?;
        if &bytes[..8] != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: "bad checkpoint magic".into(),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format {
                offset: 8,
                detail: format!("unsupported checkpoint version {version}"),
            });
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        need(bytes.len(), HEADER + mlen, "manifest")?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER..HEADER + mlen]).map_err(|e| Error::Format {
            offset: HEADER as u64,
            detail: format!("bad manifest: {e}"),
        })?;
        let payload = &bytes[HEADER + mlen..];
        let mut ckpt = Checkpoint {
            tensors: BTreeMap::new(),
            meta: manifest.meta,
        };
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            need(payload.len(), start + 8 * n, &format!("tensor `{}`", e.name))?;
            let data = payload[start..start + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| Error::Format {
                offset: (HEADER + mlen + start) as u64,
                detail: format!("tensor `{}`: {err}", e.name),
            })?;
            ckpt.insert(e.name, t)?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("b/w", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap())
            .unwrap();
        c.insert("a", Tensor::vector(vec![std::f64::consts::PI]).unwrap()).unwrap();
        c.set_meta("classes", "3,1,4");
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn payload_layout_is_little_endian_in_name_order() {
        let bytes = sample().to_bytes().unwrap();
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload = &bytes[20 + mlen..];
        assert_eq!(payload.len(), 8 * 7);
        assert_eq!(&payload[..8], &std::f64::consts::PI.to_le_bytes());
        assert_eq!(&payload[8..16], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let cut = &bytes[..bytes.len() - 3];
        let err = Checkpoint::from_bytes(cut).unwrap_err().to_string();
        assert!(err.contains("missing 3 bytes"), "{err}");
    }

    #[test]
    fn duplicate_and_missing_entries() {
        let mut c = sample();
        assert!(c.insert("a", Tensor::zeros([1])).is_err());
        assert!(c.get("nope").is_err());
        let sub = c.sub("b/");
        assert!(sub.contains("w"));
    }
}
