//! Named tensor snapshots and the `FTSNAP1` file format.
//!
//! ```text
//! "FTSNAP1"          7 bytes magic
//! count              u32
//! per record:
//!   name_len         u16, then UTF-8 name
//!   ndim             u8, then ndim x u64 dims
//!   values           prod(dims) x f32
//! ```
//!
//! All integers and floats are little-endian. In-memory snapshots hold
//! `f64` and restore exactly; the file stores `f32`, so a file written
//! from a loaded file reproduces the same bytes.

use crate::error::{Error, Result};

const MAGIC: &[u8; 7] = b"FTSNAP1";

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl SnapshotEntry {
    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Ordered list of named tensors. Immutable once taken.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Snapshot {
    entries: Vec<SnapshotEntry>,
}

impl Snapshot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::ShapeMismatch(format!("`{name}`: shape {shape:?} holds {expected} values, got {}", values.len())));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::SnapshotFormat(format!("duplicate tensor name `{name}`")));
        }
        self.entries.push(SnapshotEntry { name, shape, values });
        Ok(())
    }

    pub fn entries(&self) -> &[SnapshotEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&SnapshotEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: Snapshot) -> Result<()> {
        for e in other.entries {
            self.push(e.name, e.shape, e.values)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &e.values {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parses a snapshot; returns it and the number of bytes consumed.
    pub fn from_bytes_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::SnapshotFormat("bad magic".into()));
        }
        let count = u32::from_le_bytes(r.array()?);
        let mut snap = Snapshot::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::SnapshotFormat("name is not UTF-8".into()))?
                .to_string();
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(r.array()?) as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(f32::from_le_bytes(r.array()?) as f64);
            }
            snap.push(name, shape, values)?;
        }
        Ok((snap, r.pos))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (snap, used) = Self::from_bytes_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::SnapshotFormat(format!("{} trailing bytes", bytes.len() - used)));
        }
        Ok(snap)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::SnapshotFormat("truncated payload".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn file_round_trip_is_byte_exact(
            tensors in prop::collection::vec((1usize..4, 1usize..5, prop::collection::vec(-1e3f32..1e3, 20)), 0..5)
        ) {
            let mut s = Snapshot::new();
            for (i, (r, c, vals)) in tensors.iter().enumerate() {
                let values: Vec<f64> = vals.iter().take(r * c).map(|&v| v as f64).collect();
                s.push(format!("t{i}"), vec![*r, *c], values).unwrap();
            }
            let bytes = s.to_bytes();
            let back = Snapshot::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut s = Snapshot::new();
        s.push("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = s.to_bytes();
        assert!(Snapshot::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(Snapshot::from_bytes(&bad).is_err());
        assert!(s.push("w", vec![1], vec![0.0]).is_err());
        assert!(s.push("v", vec![3], vec![0.0]).is_err());
    }
}
