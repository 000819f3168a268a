//! Binary checkpoint format.
//!
//! ```text
//! "SUNET1"
//! u64 entry_count
//! entry_count x { u64 name_len, name (UTF-8), u64 ndim, ndim x u64 dim, u64 offset }
//! payload: little-endian f64 values; `offset` is the byte offset of an
//!          entry's first value from the start of the payload
//! ```
//!
//! All integers are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 6] = b"SUNET1";

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 8 * t.len() as u64;
    }
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(self.file, self.pos as u64, "unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn bounded(&mut self, what: &str) -> Result<usize> {
        let at = self.pos as u64;
        let v = self.u64()?;
        if v > self.bytes.len() as u64 * 8 {
            return Err(Error::parse(self.file, at, format!("implausible {what} {v}")));
        }
        Ok(v as usize)
    }
}

/// Parses checkpoint bytes; `file` only labels errors.
pub fn from_bytes(bytes: &[u8], file: &Path) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0, file };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::parse(file, 0, "bad magic, expected SUNET1"));
    }
    let count = r.bounded("entry count")?;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_at = r.pos as u64;
        let len = r.bounded("name length")?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::parse(file, name_at, "parameter name is not UTF-8"))?
            .to_owned();
        let ndim = r.bounded("rank")?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.bounded("dimension")?);
        }
        let off_at = r.pos as u64;
        let offset = r.u64()?;
        manifest.push((name, shape, offset, off_at));
    }
    let payload = &bytes[r.pos..];
    let mut store = ParamStore::new();
    for (name, shape, offset, off_at) in manifest {
        let n: usize = shape.iter().product();
        let end = offset
            .checked_add(8 * n as u64)
            .filter(|&e| e <= payload.len() as u64 && offset % 8 == 0)
            .ok_or_else(|| Error::parse(file, off_at, format!("payload range for {name} out of bounds")))?;
        let data = payload[offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::parse(file, r.pos as u64 + offset, format!("{name}: {e}")))?;
        store
            .insert(name, t)
            .map_err(|e| Error::parse(file, off_at, e.to_string()))?;
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
