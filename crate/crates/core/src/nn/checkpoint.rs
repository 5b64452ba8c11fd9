//! Parameter files: a magic line, a little-endian `u64` header length, a
//! JSON header listing `(name, shape, offset)` for each tensor, then the
//! tensors as flat little-endian `f32` arrays. Offsets count `f32`
//! elements from the start of the data section.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::scalar::Real;
use crate::error::{Error, Result};

pub const MAGIC: &str = "RGFLOW-CKPT-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub entries: Vec<TensorEntry>,
    data: Vec<f32>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            entries: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, tensor: &Array2<T>) {
        let offset = self.data.len();
        self.data.extend(tensor.iter().map(|&x| x.as_f64() as f32));
        self.entries.push(TensorEntry {
            name: name.into(),
            shape: vec![tensor.nrows(), tensor.ncols()],
            offset,
        });
    }

    pub fn get<T: Real>(&self, name: &str) -> Option<Array2<T>> {
        let e = self.entries.iter().find(|e| e.name == name)?;
        let (r, c) = match e.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => return None,
        };
        let slice = self.data.get(e.offset..e.offset + r * c)?;
        Some(Array2::from_shape_fn((r, c), |(i, j)| T::of(slice[i * c + j] as f64)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: MAGIC.to_string(),
            tensors: self.entries.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 9 + json.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let magic_len = MAGIC.len() + 1;
        if bytes.len() < magic_len + 8 || &bytes[..MAGIC.len()] != MAGIC.as_bytes() || bytes[MAGIC.len()] != b'\n' {
            return Err(bad("missing RGFLOW-CKPT-1 magic"));
        }
        let mut len_bytes = [0u8; 8];
        len_bytes.copy_from_slice(&bytes[magic_len..magic_len + 8]);
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let header_start = magic_len + 8;
        let data_start = header_start
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[header_start..data_start])?;
        if header.format != MAGIC {
            return Err(bad("unsupported format version"));
        }
        let raw = &bytes[data_start..];
        if raw.len() % 4 != 0 {
            return Err(bad("data section is not a whole number of f32 values"));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset + n > data.len() {
                return Err(bad(&format!("tensor {} exceeds data section", e.name)));
            }
        }
        Ok(Self {
            meta: header.meta,
            entries: header.tensors,
            data,
        })
    }

    /// Writes to a temporary sibling then renames, so a crash never leaves
    /// a half-written file at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
