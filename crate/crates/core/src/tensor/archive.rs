//! TARC-v1: a flat, little-endian container of named tensors.
//!
//! ```text
//! magic      8 bytes   "TARC0001"
//! count      u32
//! per entry:
//!   name_len u16
//!   name     name_len bytes, UTF-8
//!   dtype    u8        0=f32 1=f64 2=i64 3=u8
//!   rank     u8
//!   extents  rank x u64
//!   payload  row-major, tightly packed
//! ```
//!
//! There is no padding anywhere, so the encoded size is
//! `12 + sum(2 + name_len + 1 + 1 + 8 * rank + elem_size * numel)`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{DType, Tensor, TensorData};

pub const MAGIC: &[u8; 8] = b"TARC0001";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ArchiveError {
    #[error("bad magic at offset {offset}: expected \"TARC0001\"")]
    BadMagic { offset: usize },

    #[error("truncated archive at offset {offset} (entry: {entry})")]
    Truncated { entry: String, offset: usize },

    #[error("unknown dtype code {code} for entry `{entry}` at offset {offset}")]
    UnknownDtype {
        code: u8,
        entry: String,
        offset: usize,
    },

    #[error("duplicate entry name `{name}` at offset {offset}")]
    DuplicateName { name: String, offset: usize },

    #[error("empty entry name at offset {offset}")]
    EmptyName { offset: usize },

    #[error("entry name at offset {offset} is not valid UTF-8")]
    InvalidName { offset: usize },

    #[error("entry name `{name}...` is {len} bytes, limit is 65535")]
    NameTooLong { name: String, len: usize },

    #[error("entry `{name}` has rank {rank}, limit is 255")]
    RankTooLarge { name: String, rank: usize },

    #[error("{count} unexpected trailing bytes at offset {offset}")]
    TrailingBytes { count: usize, offset: usize },
}

/// Ordered map from entry name to tensor. Insertion order is the on-disk order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: IndexMap<String, Tensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds an entry. Names must be non-empty and unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> crate::Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(crate::Error::invalid("archive entry names must be non-empty"));
        }
        if self.entries.contains_key(&name) {
            return Err(crate::Error::invalid(format!("duplicate archive entry `{name}`")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Like [`get`](Self::get) but reports the missing name.
    pub fn require(&self, name: &str) -> crate::Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| crate::Error::missing(format!("archive has no entry `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Exact number of bytes [`to_bytes`](Self::to_bytes) will produce.
    pub fn encoded_len(&self) -> usize {
        12 + self
            .entries
            .iter()
            .map(|(name, t)| 2 + name.len() + 2 + 8 * t.rank() + t.dtype().size() * t.numel())
            .sum::<usize>()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ArchiveError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            if name.len() > u16::MAX as usize {
                return Err(ArchiveError::NameTooLong {
                    name: name.chars().take(32).collect(),
                    len: name.len(),
                });
            }
            if t.rank() > u8::MAX as usize {
                return Err(ArchiveError::RankTooLarge {
                    name: name.clone(),
                    rank: t.rank(),
                });
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.push(t.rank() as u8);
            for &extent in t.shape() {
                out.extend_from_slice(&(extent as u64).to_le_bytes());
            }
            match t.data() {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let header = "<header>";
        let magic = cur.take(8, header)?;
        if magic != MAGIC {
            return Err(ArchiveError::BadMagic { offset: 0 });
        }
        let count = u32::from_le_bytes(cur.array(header)?);
        let mut entries = IndexMap::new();
        for _ in 0..count {
            let entry_offset = cur.pos;
            let name_len = u16::from_le_bytes(cur.array(header)?) as usize;
            if name_len == 0 {
                return Err(ArchiveError::EmptyName { offset: entry_offset });
            }
            let name_offset = cur.pos;
            let name = std::str::from_utf8(cur.take(name_len, header)?)
                .map_err(|_| ArchiveError::InvalidName { offset: name_offset })?
                .to_string();
            if entries.contains_key(&name) {
                return Err(ArchiveError::DuplicateName {
                    name,
                    offset: entry_offset,
                });
            }
            let dtype_offset = cur.pos;
            let code = cur.array::<1>(&name)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| ArchiveError::UnknownDtype {
                code,
                entry: name.clone(),
                offset: dtype_offset,
            })?;
            let rank = cur.array::<1>(&name)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(cur.array(&name)?) as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .and_then(|n| n.checked_mul(dtype.size()).map(|b| (n, b)));
            let Some((numel, nbytes)) = numel else {
                return Err(ArchiveError::Truncated {
                    entry: name,
                    offset: cur.pos,
                });
            };
            let payload = cur.take(nbytes, &name)?;
            let data = decode_payload(dtype, payload, numel);
            let tensor = Tensor { shape, data };
            entries.insert(name, tensor);
        }
        if cur.pos != bytes.len() {
            return Err(ArchiveError::TrailingBytes {
                count: bytes.len() - cur.pos,
                offset: cur.pos,
            });
        }
        Ok(TensorArchive { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

fn decode_payload(dtype: DType, payload: &[u8], numel: usize) -> TensorData {
    match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::I64 => TensorData::I64(
            payload
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U8 => {
            debug_assert_eq!(payload.len(), numel);
            TensorData::U8(payload.to_vec())
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, entry: &str) -> Result<&'a [u8], ArchiveError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ArchiveError::Truncated {
                entry: entry.to_string(),
                offset: self.pos,
            }),
        }
    }

    fn array<const N: usize>(&mut self, entry: &str) -> Result<[u8; N], ArchiveError> {
        Ok(self.take(N, entry)?.try_into().unwrap())
    }
}
