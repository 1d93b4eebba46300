//! Binary container for trained networks.
//!
//! ```text
//! "PCDL" | u32 version
//! u32 n_meta  | n_meta  x (u32 len, key bytes, u32 len, value bytes)
//! u32 n_entry | n_entry x (u32 len, name bytes, u32 ndim, ndim x u64 dim, prod(dim) x f64)
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCDL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Invalid(format!(
                "entry '{name}' has shape {shape:?} but {} values",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::Invalid(format!("duplicate entry '{name}'")));
        }
        self.entries.push(Entry { name, shape, data });
        Ok(())
    }

    pub fn push_flat(&mut self, name: impl Into<String>, data: Vec<f64>) -> Result<()> {
        let n = data.len();
        self.push(name, vec![n], data)
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| Error::MissingEntry(name.into()))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::MissingEntry(format!("metadata '{key}'")))
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.insert(key.into(), value.to_string());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_str(&mut out, &e.name);
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4).ok() != Some(&MAGIC[..]) {
            return Err(Error::BadMagic);
        }
        let version = r.u32().map_err(|_| Error::Truncated("header".into()))?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let mut ck = Checkpoint::default();
        let meta_err = |_| Error::Truncated("metadata".into());
        let n_meta = r.u32().map_err(meta_err)?;
        for _ in 0..n_meta {
            let k = r.string().map_err(meta_err)?;
            let v = r.string().map_err(meta_err)?;
            ck.metadata.insert(k, v);
        }
        let n_entries = r.u32().map_err(|_| Error::Truncated("entry table".into()))?;
        for i in 0..n_entries {
            let name = r.string().map_err(|_| Error::Truncated(format!("#{i}")))?;
            let trunc = |_| Error::Truncated(name.clone());
            let ndim = r.u32().map_err(trunc)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64().map_err(trunc)? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Truncated(name.clone()))?;
            let raw = r.take(count * 8).map_err(trunc)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.entries.push(Entry { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Invalid(format!("{} trailing bytes", r.remaining())));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

struct Short;

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], Short> {
        if self.remaining() < n {
            return Err(Short);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, Short> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, Short> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, Short> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        Ok(String::from_utf8_lossy(b).into_owned())
    }
}
