//! Checkpoint archives: an uncompressed tar holding `manifest.json`, one raw
//! little-endian `f32` array per parameter at `<group>/<name>.f32`, and any
//! auxiliary files (for example a loss-history CSV). Headers carry no
//! timestamps or ownership, so identical contents give identical bytes.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use deid_nn::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub group: String,
    pub name: String,
    pub shape: [usize; 4],
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    fingerprint: String,
    arrays: Vec<ArrayRecord>,
    files: Vec<String>,
    meta: serde_json::Value,
}

/// In-memory checkpoint: a kind tag, free-form metadata, parameter groups
/// and auxiliary files.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub groups: BTreeMap<String, ParamSet<f32>>,
    pub files: BTreeMap<String, Vec<u8>>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.into(),
            meta,
            groups: BTreeMap::new(),
            files: BTreeMap::new(),
        }
    }

    pub fn with_group(mut self, name: &str, params: &ParamSet<f32>) -> Self {
        self.groups.insert(name.to_string(), params.clone());
        self
    }

    pub fn with_file(mut self, name: &str, bytes: Vec<u8>) -> Self {
        self.files.insert(name.to_string(), bytes);
        self
    }

    pub fn group(&self, name: &str) -> Result<&ParamSet<f32>> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Config(format!("{} checkpoint has no parameter group '{name}'", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Config(format!("expected a {kind} checkpoint, found {}", self.kind)))
        }
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Config(format!("{} checkpoint metadata lacks '{key}'", self.kind)))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("metadata field '{key}': {e}")))
    }

    /// SHA-256 over the kind and every array's group, name, shape and bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.kind.as_bytes());
        for (group, params) in &self.groups {
            for (name, t) in params.iter() {
                h.update([0u8]);
                h.update(group.as_bytes());
                h.update([0u8]);
                h.update(name.as_bytes());
                for d in t.shape {
                    h.update((d as u64).to_le_bytes());
                }
                for v in &t.data {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays = Vec::new();
        let mut blobs = Vec::new();
        for (group, params) in &self.groups {
            for (name, t) in params.iter() {
                let file = format!("{group}/{name}.f32");
                arrays.push(ArrayRecord {
                    group: group.clone(),
                    name: name.to_string(),
                    shape: t.shape,
                    file: file.clone(),
                });
                let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                blobs.push((file, bytes));
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            fingerprint: self.fingerprint(),
            arrays,
            files: self.files.keys().cloned().collect(),
            meta: self.meta.clone(),
        };
        let manifest_bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");

        let mut builder = tar::Builder::new(Vec::new());
        let mut append = |path: &str, bytes: &[u8]| {
            let mut header = tar::Header::new_ustar();
            header.set_size(bytes.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_uid(0);
            header.set_gid(0);
            header.set_entry_type(tar::EntryType::Regular);
            builder
                .append_data(&mut header, path, bytes)
                .expect("writing to an in-memory archive");
        };
        append(MANIFEST_FILE, &manifest_bytes);
        for (file, bytes) in &blobs {
            append(file, bytes);
        }
        for (name, bytes) in &self.files {
            append(name, bytes);
        }
        builder.into_inner().expect("finishing an in-memory archive")
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
        let bad = |m: String| Error::format(origin, m);
        let mut archive = tar::Archive::new(bytes);
        let mut contents: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for entry in archive.entries().map_err(|e| bad(e.to_string()))? {
            let mut entry = entry.map_err(|e| bad(e.to_string()))?;
            let path = entry.path().map_err(|e| bad(e.to_string()))?.to_string_lossy().into_owned();
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf).map_err(|e| bad(e.to_string()))?;
            contents.insert(path, buf);
        }
        let manifest_bytes = contents
            .remove(MANIFEST_FILE)
            .ok_or_else(|| bad("archive has no manifest.json".into()))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes).map_err(|e| bad(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", manifest.format_version)));
        }
        let mut groups: BTreeMap<String, ParamSet<f32>> = BTreeMap::new();
        for rec in &manifest.arrays {
            let raw = contents
                .remove(&rec.file)
                .ok_or_else(|| bad(format!("missing array {}", rec.file)))?;
            let n: usize = rec.shape.iter().product();
            if raw.len() != 4 * n {
                return Err(bad(format!("array {} has {} bytes, expected {}", rec.file, raw.len(), 4 * n)));
            }
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            groups
                .entry(rec.group.clone())
                .or_default()
                .add(rec.name.clone(), Tensor::from_vec(rec.shape, data));
        }
        let mut files = BTreeMap::new();
        for name in &manifest.files {
            let b = contents.remove(name).ok_or_else(|| bad(format!("missing file {name}")))?;
            files.insert(name.clone(), b);
        }
        let ck = Checkpoint {
            kind: manifest.kind,
            meta: manifest.meta,
            groups,
            files,
        };
        if ck.fingerprint() != manifest.fingerprint {
            return Err(bad("fingerprint does not match archive contents".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// SHA-256 of a byte slice, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
