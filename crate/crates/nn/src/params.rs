//! Named parameter storage, binary serialization and content hashing.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{NnError, Tensor};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

const MAGIC: &[u8; 4] = b"LVCK";
const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    /// Receives gradients and optimizer updates.
    Trainable,
    /// A learnable parameter currently held fixed.
    Frozen,
    /// Running statistics; updated by forward passes, never by gradients.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
}

/// Ordered collection of named tensors owned by one model.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
            index: self.index.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    role: ParamRole,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    meta: serde_json::Value,
    entries: Vec<EntryHeader>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Identity used by [`crate::Graph`] to memoize parameter bindings.
    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, role: ParamRole) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, role });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape());
        self.entries[id.0].value = value;
    }

    pub fn role(&self, id: ParamId) -> ParamRole {
        self.entries[id.0].role
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Number of scalar learnable (trainable or frozen) values.
    pub fn num_learnable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.role != ParamRole::Buffer)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Toggle learnable parameters whose name starts with `prefix`.
    /// Buffers are left untouched. Returns how many entries changed role.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            let role = match e.role {
                ParamRole::Buffer => continue,
                _ if trainable => ParamRole::Trainable,
                _ => ParamRole::Frozen,
            };
            if role != e.role {
                n += 1;
            }
            e.role = role;
        }
        n
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable("", false);
    }

    /// SHA-256 over names, shapes and little-endian values of every entry
    /// whose name starts with `prefix`.
    pub fn content_hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            h.update(e.name.as_bytes());
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy values (not roles) from `other` for every name present in both.
    pub fn copy_values_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize, NnError> {
        let mut n = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            let Some(id) = other.id(&e.name) else { continue };
            let src = other.value(id);
            if src.shape() != e.value.shape() {
                return Err(NnError::Format(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    e.name,
                    src.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.clone();
            n += 1;
        }
        Ok(n)
    }

    /// Serialize as `LVCK` | version | u32 header length | JSON header |
    /// raw little-endian f64 values in entry order.
    pub fn write_to<W: Write>(&self, mut w: W, meta: serde_json::Value) -> Result<(), NnError> {
        let header = FileHeader {
            meta,
            entries: self
                .entries
                .iter()
                .map(|e| EntryHeader {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    role: e.role,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| NnError::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for e in &self.entries {
            buf.clear();
            for v in e.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self, meta: serde_json::Value) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out, meta).expect("writing to a Vec cannot fail");
        out
    }

    /// Inverse of [`ParamStore::write_to`]; returns the store and its metadata.
    pub fn read_from<R: Read>(mut r: R) -> Result<(ParamStore, serde_json::Value), NnError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Format("not a checkpoint file".into()));
        }
        let mut ver = [0u8; 1];
        r.read_exact(&mut ver)?;
        if ver[0] != VERSION {
            return Err(NnError::Format(format!("unsupported checkpoint version {}", ver[0])));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: FileHeader = serde_json::from_slice(&json).map_err(|e| NnError::Format(e.to_string()))?;
        let mut store = ParamStore::new();
        for eh in header.entries {
            let n: usize = eh.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.add(eh.name, Tensor::from_vec(&eh.shape, data), eh.role);
        }
        Ok((store, header.meta))
    }
}
