//! Versioned binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MMAP1"                  magic
//! [u8; 32]                 model spec hash
//! u32                      entry count
//! entries, sorted by name:
//!   u32 name_len, name
//!   u8 kind (0 = f64 tensor, 1 = bytes)
//!   tensor: u32 ndim, u64 dims[ndim], f64 data[prod(dims)]
//!   bytes:  u64 len, data
//! [u8; 32]                 SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::optim::{Adam, AdamConfig};
use super::params::ParameterStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MMAP1";

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor { shape: Vec<usize>, data: Vec<f64> },
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub spec_hash: [u8; 32],
    entries: BTreeMap<String, Entry>,
}

pub fn spec_hash(spec: &[u8]) -> [u8; 32] {
    Sha256::digest(spec).into()
}

impl Container {
    pub fn new(spec_hash: [u8; 32]) -> Self {
        Self {
            spec_hash,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.insert(name.into(), Entry::Tensor { shape, data });
    }

    pub fn insert_bytes(&mut self, name: impl Into<String>, data: Vec<u8>) {
        self.entries.insert(name.into(), Entry::Bytes(data));
    }

    pub fn insert_json<T: serde::Serialize>(&mut self, name: impl Into<String>, value: &T) -> Result<()> {
        let bytes = serde_json::to_vec(value)
            .map_err(|e| Error::MalformedCheckpoint(format!("serializing entry: {e}")))?;
        self.insert_bytes(name, bytes);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.entries.get(name) {
            Some(Entry::Tensor { shape, data }) => Ok((shape, data)),
            Some(_) => Err(Error::MalformedCheckpoint(format!("entry `{name}` is not a tensor"))),
            None => Err(Error::MalformedCheckpoint(format!("missing entry `{name}`"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.entries.get(name) {
            Some(Entry::Bytes(b)) => Ok(b),
            Some(_) => Err(Error::MalformedCheckpoint(format!("entry `{name}` is not a byte blob"))),
            None => Err(Error::MalformedCheckpoint(format!("missing entry `{name}`"))),
        }
    }

    pub fn json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        serde_json::from_slice(self.bytes(name)?)
            .map_err(|e| Error::MalformedCheckpoint(format!("entry `{name}`: {e}")))
    }

    /// Stores every parameter under `prefix/name`.
    pub fn insert_params(&mut self, prefix: &str, store: &ParameterStore) {
        let order: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
        self.insert_bytes(format!("{prefix}#order"), order.join("\n").into_bytes());
        for (_, p) in store.iter() {
            self.insert_tensor(format!("{prefix}/{}", p.name), p.shape.clone(), p.data.clone());
        }
    }

    pub fn params(&self, prefix: &str) -> Result<ParameterStore> {
        let order = String::from_utf8(self.bytes(&format!("{prefix}#order"))?.to_vec())
            .map_err(|_| Error::MalformedCheckpoint(format!("{prefix}: order is not utf-8")))?;
        let mut store = ParameterStore::new();
        for name in order.lines().filter(|l| !l.is_empty()) {
            let (shape, data) = self.tensor(&format!("{prefix}/{name}"))?;
            store.add(name, shape.to_vec(), data.to_vec())?;
        }
        Ok(store)
    }

    pub fn insert_adam(&mut self, prefix: &str, adam: &Adam, store: &ParameterStore) -> Result<()> {
        self.insert_json(format!("{prefix}#adam"), &(adam.config, adam.step))?;
        for (id, p) in store.iter() {
            let n = p.data.len();
            self.insert_tensor(format!("{prefix}.m/{}", p.name), vec![n], adam.first[id].clone());
            self.insert_tensor(format!("{prefix}.v/{}", p.name), vec![n], adam.second[id].clone());
        }
        Ok(())
    }

    pub fn adam(&self, prefix: &str, store: &ParameterStore) -> Result<Adam> {
        let (config, step): (AdamConfig, u64) = self.json(&format!("{prefix}#adam"))?;
        let mut adam = Adam::new(config, store);
        adam.step = step;
        for (id, p) in store.iter() {
            let (_, m) = self.tensor(&format!("{prefix}.m/{}", p.name))?;
            let (_, v) = self.tensor(&format!("{prefix}.v/{}", p.name))?;
            if m.len() != p.data.len() || v.len() != p.data.len() {
                return Err(Error::MalformedCheckpoint(format!(
                    "optimizer state for `{}` has wrong length",
                    p.name
                )));
            }
            adam.first[id] = m.to_vec();
            adam.second[id] = v.to_vec();
        }
        Ok(adam)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.spec_hash);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Tensor { shape, data } => {
                    out.push(0);
                    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                    for &d in shape {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Bytes(b) => {
                    out.push(1);
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        let digest: [u8; 32] = Sha256::digest(&out).into();
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::VersionMismatch(
                "not an MMAP1 checkpoint (bad magic)".into(),
            ));
        }
        if bytes.len() < MAGIC.len() + 32 + 4 + 32 {
            return Err(Error::MalformedCheckpoint("truncated header".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let expected: [u8; 32] = Sha256::digest(body).into();
        if expected != digest {
            return Err(Error::MalformedCheckpoint("checksum mismatch".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let mut spec_hash = [0u8; 32];
        spec_hash.copy_from_slice(r.take(32)?);
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::MalformedCheckpoint("entry name is not utf-8".into()))?
                .to_owned();
            let entry = match r.take(1)?[0] {
                0 => {
                    let ndim = r.u32()? as usize;
                    let shape = (0..ndim)
                        .map(|_| r.u64().map(|d| d as usize))
                        .collect::<Result<Vec<_>>>()?;
                    let n: usize = shape.iter().product();
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| {
                        Error::MalformedCheckpoint("tensor size overflow".into())
                    })?)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::Tensor { shape, data }
                }
                1 => {
                    let len = r.u64()? as usize;
                    Entry::Bytes(r.take(len)?.to_vec())
                }
                k => {
                    return Err(Error::MalformedCheckpoint(format!(
                        "unknown entry kind {k} for `{name}`"
                    )))
                }
            };
            entries.insert(name, entry);
        }
        if r.pos != body.len() {
            return Err(Error::MalformedCheckpoint("trailing bytes".into()));
        }
        Ok(Self { spec_hash, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::MalformedCheckpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
