//! `PGN1` parameter container.
//!
//! Layout: the magic bytes `PGN1`, a little-endian `u32` manifest length,
//! the UTF-8 JSON manifest `[{"name": str, "shape": [...], "offset": u64}]`,
//! then every tensor as contiguous little-endian `f32`. `offset` is the byte
//! offset of a tensor from the start of the payload.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PGN1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// Tensors read back from a container, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Encodes the parameters whose names satisfy `keep`, in store order.
pub fn encode(store: &ParamStore, keep: impl Fn(&str) -> bool) -> Vec<u8> {
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    for p in store.iter().filter(|p| keep(&p.name)) {
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &v in p.value.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let err = |m: String| Error::Checkpoint(m);
    if bytes.len() < 8 {
        return Err(err(format!("container truncated: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(err(format!("bad magic {:?}, expected PGN1", &bytes[..4])));
    }
    let mlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let json = bytes
        .get(8..8 + mlen)
        .ok_or_else(|| err(format!("manifest truncated: need {mlen} bytes")))?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_slice(json).map_err(|e| err(format!("manifest: {e}")))?;
    let payload = &bytes[8 + mlen..];
    let mut entries = Vec::with_capacity(manifest.len());
    let mut seen = BTreeSet::new();
    for e in manifest {
        if !seen.insert(e.name.clone()) {
            return Err(err(format!("duplicate tensor `{}`", e.name)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let raw = payload
            .get(start..start + 4 * n)
            .ok_or_else(|| err(format!("payload truncated in `{}`", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        entries.push((e.name, Tensor::from_parts(e.shape, data)));
    }
    Ok(Checkpoint { entries })
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>, keep: impl Fn(&str) -> bool) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(store, keep)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Copies checkpoint tensors into `store`.
///
/// Every store parameter selected by `expect` must be present with the same
/// shape. Checkpoint tensors that are not selected parameters of the store
/// are rejected. Parameters not selected keep their current values.
pub fn load_into(ckpt: &Checkpoint, store: &mut ParamStore, expect: impl Fn(&str) -> bool) -> Result<()> {
    let wanted: Vec<(String, Vec<usize>)> = store
        .iter()
        .filter(|p| expect(&p.name))
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    let missing: Vec<&str> = wanted
        .iter()
        .filter(|(n, _)| ckpt.get(n).is_none())
        .map(|(n, _)| n.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("missing name(s): {}", missing.join(", "))));
    }
    let extras: Vec<&str> = ckpt
        .names()
        .filter(|n| !wanted.iter().any(|(w, _)| w == n))
        .collect();
    if !extras.is_empty() {
        return Err(Error::Checkpoint(format!("unexpected name(s): {}", extras.join(", "))));
    }
    let mismatched: Vec<String> = wanted
        .iter()
        .filter_map(|(n, shape)| {
            let t = ckpt.get(n).unwrap();
            (t.shape() != &shape[..]).then(|| format!("{n} (expected {shape:?}, found {:?})", t.shape()))
        })
        .collect();
    if !mismatched.is_empty() {
        return Err(Error::Checkpoint(format!("shape mismatch: {}", mismatched.join(", "))));
    }
    for (name, _) in &wanted {
        store.set(name, ckpt.get(name).unwrap().clone())?;
    }
    Ok(())
}
