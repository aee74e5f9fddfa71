//! Versioned archive of named `f32` arrays plus JSON metadata.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PYRGNARC" | version u32 | header length u64 | header JSON
//! | array payloads as f32, in header order | SHA-256 of everything before
//! ```
//!
//! The header lists every array's name, kind and shape. Loading verifies the
//! trailing digest before decoding anything, so a truncated or edited file is
//! rejected as a whole.

use std::path::Path;

use pyragen_core::params::{ArrayKind, Params};
use pyragen_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 8] = b"PYRGNARC";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub metadata: Map<String, Value>,
    pub arrays: Params<f32>,
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    kind: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: Map<String, Value>,
    arrays: Vec<ArrayHeader>,
}

fn kind_name(k: ArrayKind) -> &'static str {
    match k {
        ArrayKind::Weight => "weight",
        ArrayKind::Buffer => "buffer",
    }
}

impl Archive {
    pub fn new() -> Self {
        Archive {
            metadata: Map::new(),
            arrays: Params::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            metadata: self.metadata.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, e)| ArrayHeader {
                    name: name.to_string(),
                    kind: kind_name(e.kind).into(),
                    shape: e.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Corrupt(e.to_string()))?;
        let payload: usize = self.arrays.iter().map(|(_, e)| e.tensor.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, e) in self.arrays.iter() {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
            return Err(Error::Corrupt(format!(
                "{} bytes is too short",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Corrupt("not a pyragen archive".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corrupt(
                "checksum mismatch (truncated or modified)".into(),
            ));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Corrupt("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let mut arrays = Params::new();
        let mut pos = header_end;
        for a in header.arrays {
            let kind = match a.kind.as_str() {
                "weight" => ArrayKind::Weight,
                "buffer" => ArrayKind::Buffer,
                other => {
                    return Err(Error::Corrupt(format!(
                        "array `{}` has kind `{other}`",
                        a.name
                    )))
                }
            };
            let n: usize = a.shape.iter().product();
            let end = pos
                .checked_add(n * 4)
                .filter(|&e| e <= body.len())
                .ok_or_else(|| {
                    Error::Corrupt(format!("payload of `{}` runs past the end", a.name))
                })?;
            let data = body[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            arrays.insert(a.name, kind, Tensor::from_vec(&a.shape, data)?);
            pos = end;
        }
        if pos != body.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes",
                body.len() - pos
            )));
        }
        Ok(Archive {
            metadata: header.metadata,
            arrays,
        })
    }

    /// Write to a sibling temporary file and rename, so readers never see a
    /// partial archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Corrupt(format!("metadata `{key}` missing or not a string")))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.metadata
            .get(key)
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Corrupt(format!("metadata `{key}` missing or not an integer")))
    }

    pub fn meta(&self, key: &str) -> Result<&Value> {
        self.metadata
            .get(key)
            .ok_or_else(|| Error::Corrupt(format!("metadata `{key}` missing")))
    }

    /// Arrays under `prefix`, with the prefix kept.
    pub fn namespace(&self, prefix: &str) -> Params<f32> {
        let mut p = Params::new();
        for (name, e) in self.arrays.iter() {
            if name.starts_with(prefix) {
                p.insert(name, e.kind, e.tensor.clone());
            }
        }
        p
    }
}

impl Default for Archive {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new();
        a.metadata.insert("step".into(), Value::from(7u64));
        a.arrays.weight(
            "x/w",
            Tensor::from_vec(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap(),
        );
        a.arrays
            .buffer("x/w.u", Tensor::from_vec(&[2], vec![0.6, 0.8]).unwrap());
        a
    }

    #[test]
    fn round_trip_is_bitwise() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a.metadata, b.metadata);
        assert_eq!(a.arrays.digest(), b.arrays.digest());
        assert_eq!(b.arrays.entry("x/w.u").unwrap().kind, ArrayKind::Buffer);
    }

    #[test]
    fn truncation_and_bit_flips_are_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Archive::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))),
                "cut {cut}"
            );
        }
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(
            Archive::from_bytes(&flipped),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn future_versions_are_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(
            Archive::from_bytes(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
    }
}
