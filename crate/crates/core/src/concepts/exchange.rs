// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept-vector exchange files.
//!
//! A directory holds `concepts.json` and `vectors.bin`. The binary file is
//! little-endian `f32`, `dim` values per vector, in manifest order; each
//! entry's `offset` is its starting byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConceptVector, Method, Space};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "concepts.json";
pub const VECTORS_FILE: &str = "vectors.bin";
pub const EXCHANGE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub concept_id: String,
    pub method: Method,
    pub layer_tag: String,
    #[serde(default = "default_space")]
    pub space: Space,
    pub dim: usize,
    pub offset: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub train_meta: BTreeMap<String, serde_json::Value>,
}

fn default_space() -> Space {
    Space::Token
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptManifest {
    pub format_version: u32,
    pub vectors: Vec<ConceptEntry>,
}

/// Writes vectors as `f32`; values are rounded to the nearest `f32`.
pub fn write_concepts(dir: &Path, vectors: &[ConceptVector]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bin = Vec::new();
    let mut entries = Vec::with_capacity(vectors.len());
    for v in vectors {
        if let Some(x) = v.values.iter().find(|x| !x.is_finite()) {
            return Err(Error::ConceptFile(format!(
                "vector `{}` holds non-finite value {x}",
                v.concept_id
            )));
        }
        entries.push(ConceptEntry {
            concept_id: v.concept_id.clone(),
            method: v.method,
            layer_tag: v.layer_tag.clone(),
            space: v.space,
            dim: v.dim(),
            offset: bin.len() as u64,
            train_meta: v.train_meta.clone(),
        });
        for &x in &v.values {
            bin.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let manifest = ConceptManifest {
        format_version: EXCHANGE_VERSION,
        vectors: entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let vpath = dir.join(VECTORS_FILE);
    fs::write(&vpath, bin).map_err(|e| Error::io(&vpath, e))?;
    Ok(())
}

/// Parses an exchange pair held in memory.
pub fn concepts_from_bytes(manifest: &[u8], vectors: &[u8]) -> Result<Vec<ConceptVector>> {
    if manifest.iter().all(u8::is_ascii_whitespace) {
        log::warn!("concept manifest is empty; no vectors loaded");
        return Ok(Vec::new());
    }
    let m: ConceptManifest = serde_json::from_slice(manifest).map_err(|e| Error::ConceptFile(format!("manifest: {e}")))?;
    if m.format_version != EXCHANGE_VERSION {
        return Err(Error::ConceptFile(format!("unsupported format_version {}", m.format_version)));
    }
    if m.vectors.is_empty() {
        log::warn!("concept manifest lists no vectors");
    }
    let mut expected = 0u64;
    let mut out = Vec::with_capacity(m.vectors.len());
    for (i, e) in m.vectors.into_iter().enumerate() {
        if e.offset != expected {
            return Err(Error::ConceptFile(format!(
                "vectors[{i}].offset is {} but the previous vectors end at byte {expected}",
                e.offset
            )));
        }
        let end = e.offset + 4 * e.dim as u64;
        if end > vectors.len() as u64 {
            return Err(Error::ConceptFile(format!(
                "vectors[{i}] needs bytes {}..{end} but the vector file has {}",
                e.offset,
                vectors.len()
            )));
        }
        let values: Vec<f64> = vectors[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        if let Some(j) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::ConceptFile(format!(
                "vectors[{i}] (`{}`) entry {j} is not finite",
                e.concept_id
            )));
        }
        let mut v = ConceptVector::new(e.concept_id, e.layer_tag, e.method, e.space, values);
        v.train_meta.extend(e.train_meta);
        out.push(v);
        expected = end;
    }
    if expected != vectors.len() as u64 {
        return Err(Error::ConceptFile(format!(
            "vector file has {} bytes but the manifest accounts for {expected}",
            vectors.len()
        )));
    }
    Ok(out)
}

/// Reads an exchange directory, keeping each entry's recorded method.
pub fn read_concepts(dir: &Path) -> Result<Vec<ConceptVector>> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let vpath = dir.join(VECTORS_FILE);
    let vectors = match fs::read(&vpath) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && manifest.iter().all(u8::is_ascii_whitespace) => Vec::new(),
        Err(e) => return Err(Error::io(&vpath, e)),
    };
    concepts_from_bytes(&manifest, &vectors)
}

/// Reads vectors produced elsewhere (for example dictionary columns of a
/// sparse autoencoder) and tags them as external candidates. Dimensions are
/// checked against an archive when the vectors are used.
pub fn import_external_vectors(dir: &Path) -> Result<Vec<ConceptVector>> {
    let mut vs = read_concepts(dir)?;
    vs.iter_mut().for_each(|v| v.method = Method::External);
    Ok(vs)
}
