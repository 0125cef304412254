//! Precomputed item embeddings and their binary file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FTEB1"            5 bytes magic
//! dim                u32
//! rows               u64
//! per row:
//!   id_len           u16
//!   id               id_len bytes of UTF-8
//!   values           dim x f32
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"FTEB1";

/// Item id to fixed-length vector map. Row order is insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<String>,
    values: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmbeddingFormat("dim must be positive".into()));
        }
        Ok(Self { dim, ids: Vec::new(), values: Vec::new(), index: HashMap::new() })
    }

    pub fn insert(&mut self, id: impl Into<String>, row: &[f32]) -> Result<()> {
        let id = id.into();
        if row.len() != self.dim {
            return Err(Error::EmbeddingFormat(format!(
                "dim mismatch for `{id}`: expected {}, got {}",
                self.dim,
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::EmbeddingFormat(format!("non-finite entry {bad} in `{id}`")));
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::EmbeddingFormat(format!("id too long: {} bytes", id.len())));
        }
        if self.index.contains_key(&id) {
            return Err(Error::EmbeddingFormat(format!("duplicate id `{id}`")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&r| &self.values[r * self.dim..(r + 1) * self.dim])
    }

    /// Row lookup that reports the missing id.
    pub fn row(&self, id: &str) -> Result<&[f32]> {
        self.get(id).ok_or_else(|| Error::UnknownItem(id.to_string()))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for (r, id) in self.ids.iter().enumerate() {
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for v in &self.values[r * self.dim..(r + 1) * self.dim] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::EmbeddingFormat("bad magic".into()));
        }
        let dim = u32::from_le_bytes(cur.array()?) as usize;
        let rows = u64::from_le_bytes(cur.array()?);
        let mut table = EmbeddingTable::new(dim)?;
        let mut row = vec![0f32; dim];
        for _ in 0..rows {
            let id_len = u16::from_le_bytes(cur.array()?) as usize;
            let id = std::str::from_utf8(cur.take(id_len)?)
                .map_err(|_| Error::EmbeddingFormat("id is not valid UTF-8".into()))?
                .to_string();
            for v in row.iter_mut() {
                *v = f32::from_le_bytes(cur.array()?);
            }
            table.insert(id, &row)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::EmbeddingFormat(format!(
                "{} trailing bytes after {rows} rows",
                bytes.len() - cur.pos
            )));
        }
        Ok(table)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Reads an embedding file from disk.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    EmbeddingTable::from_bytes(&std::fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::EmbeddingFormat("truncated payload".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingTable {
        let mut t = EmbeddingTable::new(4).unwrap();
        t.insert("a", &[1.0, 2.0, 3.0, 4.0]).unwrap();
        t.insert("b", &[-0.5, 0.25, 1e-7, 9.0]).unwrap();
        t.insert("ü-c", &[f32::MIN_POSITIVE, 0.0, -0.0, 3.5]).unwrap();
        t
    }

    #[test]
    fn three_rows_dim_four() {
        let t = EmbeddingTable::from_bytes(&sample().to_bytes()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.dim(), 4);
        assert_eq!(t.ids(), &["a", "b", "ü-c"]);
    }

    #[test]
    fn rows_survive_bit_exact() {
        let t = sample();
        let back = EmbeddingTable::from_bytes(&t.to_bytes()).unwrap();
        for id in t.ids() {
            let a: Vec<u32> = t.get(id).unwrap().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.get(id).unwrap().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(back.to_bytes(), t.to_bytes());
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = sample().to_bytes();
        for cut in [3, 10, bytes.len() - 1] {
            let err = EmbeddingTable::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("truncated payload"), "{err}");
        }
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = EmbeddingTable::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn dim_mismatch_on_insert() {
        let mut t = EmbeddingTable::new(3).unwrap();
        assert!(t.insert("x", &[1.0, 2.0]).is_err());
        assert!(t.insert("y", &[1.0, f32::NAN, 2.0]).is_err());
    }
}
