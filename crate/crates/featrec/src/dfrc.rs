//! DFRC container: the versioned, checksummed binary format used for
//! backbone checkpoints, trained models, feature dumps, and raw score maps.
//!
//! Wire layout (all integers little-endian):
//!
//! ```text
//! magic   "DFRC"              4 bytes
//! version u32
//! count   u32                 number of entries
//! entry   repeated `count` times:
//!   name_len u16, name (UTF-8), dtype u8, rank u8, dims u32 x rank, payload
//! crc32   u32                 CRC-32 (IEEE) of all preceding bytes
//! ```
//!
//! Dtype codes: 0 = f32, 1 = u8 (raw bytes / UTF-8 text), 2 = f64, 3 = u32.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DFRC";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;
const DTYPE_F64: u8 = 2;
const DTYPE_U32: u8 = 3;

/// One named array (or text blob) inside a container.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32 { dims: Vec<u32>, data: Vec<f32> },
    F64 { dims: Vec<u32>, data: Vec<f64> },
    U32 { dims: Vec<u32>, data: Vec<u32> },
    Bytes(Vec<u8>),
}

impl Entry {
    pub fn text(s: &str) -> Self {
        Entry::Bytes(s.as_bytes().to_vec())
    }

    pub fn scalar_u32(v: u32) -> Self {
        Entry::U32 {
            dims: vec![1],
            data: vec![v],
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            Entry::F32 { .. } => DTYPE_F32,
            Entry::F64 { .. } => DTYPE_F64,
            Entry::U32 { .. } => DTYPE_U32,
            Entry::Bytes(_) => DTYPE_U8,
        }
    }

    fn dims(&self) -> Vec<u32> {
        match self {
            Entry::F32 { dims, .. } | Entry::F64 { dims, .. } | Entry::U32 { dims, .. } => {
                dims.clone()
            }
            Entry::Bytes(b) => vec![b.len() as u32],
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            Entry::F32 { data, .. } => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Entry::F64 { data, .. } => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Entry::U32 { data, .. } => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Entry::Bytes(b) => b.clone(),
        }
    }
}

/// An ordered name -> entry map that reads and writes the container format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: BTreeMap<String, Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, entry: Entry) {
        self.entries.insert(name.to_string(), entry);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn f32_entry(&self, name: &str, path: &Path) -> Result<(&[u32], &[f32])> {
        match self.entries.get(name) {
            Some(Entry::F32 { dims, data }) => Ok((dims, data)),
            Some(_) => Err(Error::format(path, format!("entry '{name}' is not f32"))),
            None => Err(Error::format(path, format!("missing entry '{name}'"))),
        }
    }

    pub fn text_entry(&self, name: &str, path: &Path) -> Result<String> {
        match self.entries.get(name) {
            Some(Entry::Bytes(b)) => String::from_utf8(b.clone())
                .map_err(|_| Error::format(path, format!("entry '{name}' is not UTF-8"))),
            Some(_) => Err(Error::format(path, format!("entry '{name}' is not text"))),
            None => Err(Error::format(path, format!("missing entry '{name}'"))),
        }
    }

    /// Serialize to the wire format, including the trailing checksum.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            let name_bytes = name.as_bytes();
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(entry.dtype());
            let dims = entry.dims();
            out.push(dims.len() as u8);
            for d in &dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&entry.payload());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: &str| Err(Error::format(path, msg.to_string()));
        if bytes.len() < 16 {
            return fail("file too short for header and checksum");
        }
        if &bytes[0..4] != MAGIC {
            return fail("bad magic");
        }
        let body = &bytes[..bytes.len() - 4];
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != stored_crc {
            return fail("checksum mismatch");
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;

        let mut pos = 12usize;
        let mut entries = BTreeMap::new();
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(Error::format(path, "truncated payload".to_string()));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::format(path, "entry name is not UTF-8".to_string()))?;
            let dtype = take(&mut pos, 1)?[0];
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()));
            }
            let elems: usize = dims.iter().map(|&d| d as usize).product();
            let entry = match dtype {
                DTYPE_F32 => {
                    let raw = take(&mut pos, elems * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::F32 { dims, data }
                }
                DTYPE_F64 => {
                    let raw = take(&mut pos, elems * 8)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::F64 { dims, data }
                }
                DTYPE_U32 => {
                    let raw = take(&mut pos, elems * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::U32 { dims, data }
                }
                DTYPE_U8 => Entry::Bytes(take(&mut pos, elems)?.to_vec()),
                other => {
                    return Err(Error::format(path, format!("unknown dtype {other}")));
                }
            };
            entries.insert(name, entry);
        }
        if pos != body.len() {
            return fail("trailing garbage after entries");
        }
        Ok(Container { entries })
    }
}
