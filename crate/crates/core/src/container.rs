//! Tagged binary container shared by checkpoints, datasets and DSV sets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    [u8; 4]
//! version  u32            (= 1)
//! header   u32 len + UTF-8
//! count    u32
//! entry*   u32 len + UTF-8 name, u32 ndim, u64 dims[ndim], f64 data[prod(dims)]
//! ```
//!
//! Trailing bytes after the last entry are rejected.

use std::path::Path;

use dsv_autograd::Tensor;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub header: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(magic: [u8; 4], header: impl Into<String>) -> Self {
        Container {
            magic,
            header: header.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Malformed(format!("missing entry {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.header);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a container and checks its magic against `expected`.
    pub fn from_bytes(bytes: &[u8], expected: [u8; 4]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != expected {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(&expected).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let header = r.string("header")?;
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string("entry name")?;
            let ndim = r.u32("entry rank")? as usize;
            if ndim > 16 {
                return Err(Error::Malformed(format!("entry {name:?} has rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("entry dims")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("entry {name:?} is too large")))?;
            let raw = r.take(numel.checked_mul(8).ok_or(Error::Truncated("entry data"))?, "entry data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Container { magic, header, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, expected: [u8; 4]) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, expected)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Malformed(format!("{what} is not UTF-8")))
    }
}
