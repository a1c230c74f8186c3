// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk archive layout.
//!
//! An archive is a directory with three files:
//!
//! - `manifest.json`: header fields, concept ids, and one record per sample
//!   with its token count and byte offsets into the two binary files.
//! - `embeddings.bin`: little-endian `f32`, row-major; for each sample its
//!   `n_tokens` token rows followed by the CLS row, samples concatenated in
//!   manifest order.
//! - `labels.bin`: for each sample and each concept (manifest order),
//!   `n_tokens` bytes of 0/1 token labels followed by one sample-label byte.
//!
//! Offsets are byte offsets from the start of the respective file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchiveHeader, EmbeddingArchive, Modality, NormStats, Sample, Split, FORMAT_VERSION};
use crate::error::{ArchiveErrorKind as Kind, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const LABELS_FILE: &str = "labels.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_id: String,
    modality: Modality,
    layer_tag: String,
    d: usize,
    split: Split,
    concepts: Vec<String>,
    samples: Vec<SampleEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    norm_stats: Option<NormStats>,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleEntry {
    sample_id: String,
    n_tokens: usize,
    embedding_offset: u64,
    label_offset: u64,
}

/// The three files of an archive, in memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveBytes {
    pub manifest: Vec<u8>,
    pub embeddings: Vec<u8>,
    pub labels: Vec<u8>,
}

impl EmbeddingArchive {
    /// Parses and validates an archive from the raw bytes of its three files.
    pub fn from_bytes(manifest: &[u8], embeddings: &[u8], labels: &[u8]) -> Result<Self> {
        let m: Manifest = serde_json::from_slice(manifest)
            .map_err(|e| Error::archive(Kind::MalformedManifest, None, "manifest", e.to_string()))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::archive(
                Kind::MalformedManifest,
                None,
                "format_version",
                format!("unsupported version {}", m.format_version),
            ));
        }
        if m.d == 0 {
            return Err(Error::archive(
                Kind::MalformedManifest,
                None,
                "d",
                "dimension must be positive",
            ));
        }
        let dim = m.d;
        let n_concepts = m.concepts.len();
        let mut samples = Vec::with_capacity(m.samples.len());
        for (si, e) in m.samples.iter().enumerate() {
            let sid = Some(e.sample_id.as_str());
            let base = format!("samples[{si}]");
            if e.n_tokens == 0 {
                return Err(Error::archive(
                    Kind::MalformedManifest,
                    sid,
                    format!("{base}.n_tokens"),
                    "a sample needs at least one token",
                ));
            }
            let n = e.n_tokens;
            let floats = (n + 1) * dim;
            let emb = slice_at(embeddings, e.embedding_offset, floats * 4).ok_or_else(|| {
                Error::archive(
                    Kind::OffsetMismatch,
                    sid,
                    format!("{base}.embedding_offset"),
                    format!(
                        "{} bytes at offset {} exceed {EMBEDDINGS_FILE} ({} bytes)",
                        floats * 4,
                        e.embedding_offset,
                        embeddings.len()
                    ),
                )
            })?;
            let values: Vec<f64> = emb
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            let (tokens, cls) = values.split_at(n * dim);

            let lab = slice_at(labels, e.label_offset, n_concepts * (n + 1)).ok_or_else(|| {
                Error::archive(
                    Kind::OffsetMismatch,
                    sid,
                    format!("{base}.label_offset"),
                    format!(
                        "{} bytes at offset {} exceed {LABELS_FILE} ({} bytes)",
                        n_concepts * (n + 1),
                        e.label_offset,
                        labels.len()
                    ),
                )
            })?;
            let mut token_labels = Vec::with_capacity(n_concepts);
            let mut sample_labels = Vec::with_capacity(n_concepts);
            for (ci, block) in lab.chunks_exact(n + 1).enumerate() {
                let cid = &m.concepts[ci];
                let mut decoded = Vec::with_capacity(n + 1);
                for (bi, &byte) in block.iter().enumerate() {
                    decoded.push(match byte {
                        0 => false,
                        1 => true,
                        other => {
                            let field = if bi < n {
                                format!("{base}.token_labels.{cid}[{bi}]")
                            } else {
                                format!("{base}.sample_labels.{cid}")
                            };
                            return Err(Error::archive(
                                Kind::BadLabelByte,
                                sid,
                                field,
                                format!("label byte {other} is not 0 or 1"),
                            ));
                        }
                    });
                }
                let sample_label = decoded.pop().unwrap_or(false);
                token_labels.push(decoded);
                sample_labels.push(sample_label);
            }
            samples.push(Sample {
                sample_id: e.sample_id.clone(),
                dim,
                tokens: tokens.to_vec(),
                cls: cls.to_vec(),
                token_labels,
                sample_labels,
            });
        }
        let header = ArchiveHeader {
            model_id: m.model_id,
            modality: m.modality,
            layer_tag: m.layer_tag,
            dim,
            split: m.split,
        };
        EmbeddingArchive::from_parts(m.format_version, header, m.concepts, samples, m.norm_stats, m.extra)
    }

    /// Serialises the archive into its three files. Embeddings are written as
    /// `f32`; values that came from disk round-trip bit-exactly.
    pub fn to_bytes(&self) -> Result<ArchiveBytes> {
        let mut embeddings = Vec::new();
        let mut labels = Vec::new();
        let mut entries = Vec::with_capacity(self.samples().len());
        for s in self.samples() {
            entries.push(SampleEntry {
                sample_id: s.sample_id().to_owned(),
                n_tokens: s.n_tokens(),
                embedding_offset: embeddings.len() as u64,
                label_offset: labels.len() as u64,
            });
            for v in s.token_matrix().iter().chain(s.cls()) {
                embeddings.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for ci in 0..self.concepts().len() {
                labels.extend(s.token_labels(ci).iter().map(|&b| u8::from(b)));
                labels.push(u8::from(s.sample_label(ci)));
            }
        }
        let h = self.header();
        let manifest = Manifest {
            format_version: self.format_version(),
            model_id: h.model_id.clone(),
            modality: h.modality,
            layer_tag: h.layer_tag.clone(),
            d: h.dim,
            split: h.split,
            concepts: self.concepts().to_vec(),
            samples: entries,
            norm_stats: self.norm_stats().cloned(),
            extra: self.extra().clone(),
        };
        let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
        manifest_bytes.push(b'\n');
        Ok(ArchiveBytes {
            manifest: manifest_bytes,
            embeddings,
            labels,
        })
    }
}

fn slice_at(buf: &[u8], offset: u64, len: usize) -> Option<&[u8]> {
    let start = usize::try_from(offset).ok()?;
    let end = start.checked_add(len)?;
    buf.get(start..end)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads and validates the archive directory at `dir`.
pub fn read_archive(dir: impl AsRef<Path>) -> Result<EmbeddingArchive> {
    let dir = dir.as_ref();
    let manifest = read_file(&dir.join(MANIFEST_FILE))?;
    let embeddings = read_file(&dir.join(EMBEDDINGS_FILE))?;
    let labels = read_file(&dir.join(LABELS_FILE))?;
    EmbeddingArchive::from_bytes(&manifest, &embeddings, &labels)
}

/// Writes `archive` as a directory at `dir`, creating it if needed.
pub fn write_archive(archive: &EmbeddingArchive, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = archive.to_bytes()?;
    for (name, data) in [
        (MANIFEST_FILE, &bytes.manifest),
        (EMBEDDINGS_FILE, &bytes.embeddings),
        (LABELS_FILE, &bytes.labels),
    ] {
        let path = dir.join(name);
        fs::write(&path, data).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
