// SPDX-License-Identifier: MIT OR Apache-2.0

//! Embedding archives: token-level and CLS embeddings for one layer of one
//! model over one data split, with token- and sample-level concept labels.
//!
//! An [`EmbeddingArchive`] is immutable once constructed. Every constructor
//! runs the full validation pass, so any archive value handed to the rest of
//! the crate satisfies:
//!
//! - every token matrix and CLS vector has exactly `dim` entries per row,
//! - every token label vector has exactly `n_tokens` entries,
//! - a true token label implies a true sample label for that concept,
//! - sample ids and concept ids are unique,
//! - all embedding values are finite.
//!
//! The on-disk layout lives in [`format`]; normalisation in [`norm`].

pub mod format;
pub mod norm;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{ArchiveErrorKind as Kind, Error, Result};

pub use format::{read_archive, write_archive, ArchiveBytes};
pub use norm::{apply_normalization, compute_norm_stats, NormStats};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Archive-level metadata shared by all samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub model_id: String,
    pub modality: Modality,
    /// Percentage-depth checkpoint label, e.g. `"50%"`.
    pub layer_tag: String,
    pub dim: usize,
    pub split: Split,
}

/// One input (image or text) with its token embeddings and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    sample_id: String,
    dim: usize,
    tokens: Vec<f64>,
    cls: Vec<f64>,
    // indexed by the owning archive's concept order
    token_labels: Vec<Vec<bool>>,
    sample_labels: Vec<bool>,
}

impl Sample {
    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    pub fn tokens(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.tokens.chunks_exact(self.dim)
    }

    /// Row-major `n_tokens × dim` token matrix.
    pub fn token_matrix(&self) -> &[f64] {
        &self.tokens
    }

    pub fn cls(&self) -> &[f64] {
        &self.cls
    }

    /// Token labels for the concept at `concept_index` in the archive order.
    pub fn token_labels(&self, concept_index: usize) -> &[bool] {
        &self.token_labels[concept_index]
    }

    pub fn sample_label(&self, concept_index: usize) -> bool {
        self.sample_labels[concept_index]
    }

    pub(crate) fn map_vectors(&self, mut f: impl FnMut(&mut [f64])) -> Sample {
        let mut out = self.clone();
        out.tokens.chunks_exact_mut(self.dim).for_each(&mut f);
        f(&mut out.cls);
        out
    }
}

/// Builder-side description of a sample, with labels keyed by concept id.
///
/// Concepts missing from `token_labels` default to all-false; concepts
/// missing from `sample_labels` default to false.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub tokens: Vec<Vec<f64>>,
    pub cls: Vec<f64>,
    pub token_labels: BTreeMap<String, Vec<bool>>,
    pub sample_labels: BTreeMap<String, bool>,
}

impl SampleRecord {
    pub fn new(sample_id: impl Into<String>, tokens: Vec<Vec<f64>>, cls: Vec<f64>) -> Self {
        Self {
            sample_id: sample_id.into(),
            tokens,
            cls,
            ..Default::default()
        }
    }

    /// Sets token labels and derives the sample label as "any token true".
    pub fn with_concept(mut self, concept_id: impl Into<String>, labels: Vec<bool>) -> Self {
        let id = concept_id.into();
        let any = labels.iter().any(|&b| b);
        self.token_labels.insert(id.clone(), labels);
        self.sample_labels.insert(id, any);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArchive {
    format_version: u32,
    header: ArchiveHeader,
    concepts: Vec<String>,
    samples: Vec<Sample>,
    norm_stats: Option<NormStats>,
    /// Unrecognised manifest fields, preserved verbatim.
    extra: BTreeMap<String, serde_json::Value>,
}

impl EmbeddingArchive {
    /// Builds and validates an archive from label-keyed sample records.
    pub fn new(header: ArchiveHeader, concepts: Vec<String>, records: Vec<SampleRecord>) -> Result<Self> {
        check_header(&header)?;
        let index = concept_index_map(&concepts)?;
        let dim = header.dim;
        let mut samples = Vec::with_capacity(records.len());
        for (si, rec) in records.into_iter().enumerate() {
            let sid = rec.sample_id.as_str();
            let base = format!("samples[{si}]");
            if rec.tokens.is_empty() {
                return Err(Error::archive(
                    Kind::MalformedManifest,
                    Some(sid),
                    format!("{base}.n_tokens"),
                    "a sample needs at least one token",
                ));
            }
            let mut tokens = Vec::with_capacity(rec.tokens.len() * dim);
            for (ti, row) in rec.tokens.iter().enumerate() {
                if row.len() != dim {
                    return Err(Error::archive(
                        Kind::DimensionMismatch,
                        Some(sid),
                        format!("{base}.tokens[{ti}]"),
                        format!("expected {dim} columns, got {}", row.len()),
                    ));
                }
                tokens.extend_from_slice(row);
            }
            if rec.cls.len() != dim {
                return Err(Error::archive(
                    Kind::DimensionMismatch,
                    Some(sid),
                    format!("{base}.cls"),
                    format!("expected {dim} entries, got {}", rec.cls.len()),
                ));
            }
            let n = rec.tokens.len();
            let mut token_labels = vec![vec![false; n]; concepts.len()];
            let mut sample_labels = vec![false; concepts.len()];
            for (cid, labels) in rec.token_labels {
                let ci = *index.get(cid.as_str()).ok_or_else(|| {
                    Error::archive(
                        Kind::UnknownConcept,
                        Some(sid),
                        format!("{base}.token_labels.{cid}"),
                        format!("concept `{cid}` is not declared"),
                    )
                })?;
                if labels.len() != n {
                    return Err(Error::archive(
                        Kind::LabelLengthMismatch,
                        Some(sid),
                        format!("{base}.token_labels.{cid}"),
                        format!("expected {n} labels, got {}", labels.len()),
                    ));
                }
                token_labels[ci] = labels;
            }
            for (cid, label) in rec.sample_labels {
                let ci = *index.get(cid.as_str()).ok_or_else(|| {
                    Error::archive(
                        Kind::UnknownConcept,
                        Some(sid),
                        format!("{base}.sample_labels.{cid}"),
                        format!("concept `{cid}` is not declared"),
                    )
                })?;
                sample_labels[ci] = label;
            }
            samples.push(Sample {
                sample_id: rec.sample_id,
                dim,
                tokens,
                cls: rec.cls,
                token_labels,
                sample_labels,
            });
        }
        let archive = Self {
            format_version: FORMAT_VERSION,
            header,
            concepts,
            samples,
            norm_stats: None,
            extra: BTreeMap::new(),
        };
        archive.check_samples()?;
        Ok(archive)
    }

    /// Assembles an archive from already index-ordered parts and validates it.
    pub(crate) fn from_parts(
        format_version: u32,
        header: ArchiveHeader,
        concepts: Vec<String>,
        samples: Vec<Sample>,
        norm_stats: Option<NormStats>,
        extra: BTreeMap<String, serde_json::Value>,
    ) -> Result<Self> {
        check_header(&header)?;
        concept_index_map(&concepts)?;
        let archive = Self {
            format_version,
            header,
            concepts,
            samples,
            norm_stats,
            extra,
        };
        archive.check_samples()?;
        if let Some(stats) = &archive.norm_stats {
            stats.check(archive.dim()).map_err(|e| match e {
                Error::DimensionMismatch { expected, actual } => Error::archive(
                    Kind::DimensionMismatch,
                    None,
                    "norm_stats",
                    format!("expected {expected} entries, got {actual}"),
                ),
                other => other,
            })?;
        }
        Ok(archive)
    }

    fn check_samples(&self) -> Result<()> {
        let dim = self.dim();
        let mut seen = HashSet::with_capacity(self.samples.len());
        for (si, s) in self.samples.iter().enumerate() {
            let sid = Some(s.sample_id.as_str());
            let base = format!("samples[{si}]");
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::archive(
                    Kind::DuplicateId,
                    sid,
                    format!("{base}.sample_id"),
                    "sample id is not unique",
                ));
            }
            if s.dim != dim || s.tokens.len() % dim != 0 || s.cls.len() != dim {
                return Err(Error::archive(
                    Kind::DimensionMismatch,
                    sid,
                    format!("{base}.tokens"),
                    format!("rows must have {dim} columns"),
                ));
            }
            let n = s.n_tokens();
            if n == 0 {
                return Err(Error::archive(
                    Kind::MalformedManifest,
                    sid,
                    format!("{base}.n_tokens"),
                    "a sample needs at least one token",
                ));
            }
            if let Some(pos) = s.tokens.iter().chain(&s.cls).position(|v| !v.is_finite()) {
                let field = if pos < s.tokens.len() {
                    format!("{base}.tokens[{}][{}]", pos / dim, pos % dim)
                } else {
                    format!("{base}.cls[{}]", pos - s.tokens.len())
                };
                return Err(Error::archive(Kind::NonFinite, sid, field, "embedding value is not finite"));
            }
            for (ci, cid) in self.concepts.iter().enumerate() {
                let labels = &s.token_labels[ci];
                if labels.len() != n {
                    return Err(Error::archive(
                        Kind::LabelLengthMismatch,
                        sid,
                        format!("{base}.token_labels.{cid}"),
                        format!("expected {n} labels, got {}", labels.len()),
                    ));
                }
                if !s.sample_labels[ci] {
                    if let Some(ti) = labels.iter().position(|&b| b) {
                        return Err(Error::archive(
                            Kind::LabelConsistency,
                            sid,
                            format!("{base}.token_labels.{cid}[{ti}]"),
                            "token labelled in-concept but sample label is false",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn format_version(&self) -> u32 {
        self.format_version
    }

    pub fn header(&self) -> &ArchiveHeader {
        &self.header
    }

    pub fn model_id(&self) -> &str {
        &self.header.model_id
    }

    pub fn modality(&self) -> Modality {
        self.header.modality
    }

    pub fn layer_tag(&self) -> &str {
        &self.header.layer_tag
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn split(&self) -> Split {
        self.header.split
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn norm_stats(&self) -> Option<&NormStats> {
        self.norm_stats.as_ref()
    }

    pub fn extra(&self) -> &BTreeMap<String, serde_json::Value> {
        &self.extra
    }

    pub fn concept_index(&self, concept_id: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c == concept_id)
    }

    /// Like [`concept_index`](Self::concept_index) but errors when absent.
    pub fn require_concept(&self, concept_id: &str) -> Result<usize> {
        self.concept_index(concept_id)
            .ok_or_else(|| Error::UnknownConcept(concept_id.to_owned()))
    }

    pub fn total_tokens(&self) -> usize {
        self.samples.iter().map(Sample::n_tokens).sum()
    }

    /// Number of samples whose sample label for the concept is true.
    pub fn positive_count(&self, concept_index: usize) -> usize {
        self.samples.iter().filter(|s| s.sample_label(concept_index)).count()
    }

    pub(crate) fn with_samples(&self, samples: Vec<Sample>, norm_stats: Option<NormStats>) -> Self {
        Self {
            format_version: self.format_version,
            header: self.header.clone(),
            concepts: self.concepts.clone(),
            samples,
            norm_stats,
            extra: self.extra.clone(),
        }
    }
}

fn check_header(header: &ArchiveHeader) -> Result<()> {
    if header.dim == 0 {
        return Err(Error::archive(
            Kind::MalformedManifest,
            None,
            "d",
            "dimension must be positive",
        ));
    }
    if header.layer_tag.is_empty() {
        return Err(Error::archive(
            Kind::MalformedManifest,
            None,
            "layer_tag",
            "layer tag is empty",
        ));
    }
    Ok(())
}

fn concept_index_map(concepts: &[String]) -> Result<HashMap<&str, usize>> {
    let mut map = HashMap::with_capacity(concepts.len());
    for (i, c) in concepts.iter().enumerate() {
        if map.insert(c.as_str(), i).is_some() {
            return Err(Error::archive(
                Kind::DuplicateId,
                None,
                format!("concepts[{i}]"),
                format!("concept `{c}` declared twice"),
            ));
        }
    }
    Ok(map)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn header(dim: usize, split: Split) -> ArchiveHeader {
        ArchiveHeader {
            model_id: "toy".into(),
            modality: Modality::Text,
            layer_tag: "100%".into(),
            dim,
            split,
        }
    }

    #[test]
    fn minimal_archive_is_valid() {
        let rec = SampleRecord::new("s0", vec![vec![1.0, 2.0]], vec![1.0, 2.0]).with_concept("c", vec![true]);
        let a = EmbeddingArchive::new(header(2, Split::Train), vec!["c".into()], vec![rec]).unwrap();
        assert_eq!(a.samples().len(), 1);
        assert_eq!(a.samples()[0].n_tokens(), 1);
        assert!(a.samples()[0].sample_label(0));
        assert_eq!(a.positive_count(0), 1);
    }

    #[test]
    fn label_length_mismatch_reports_sample_and_path() {
        let toks = vec![vec![0.0, 0.0]; 4];
        let rec = SampleRecord::new("s9", toks, vec![0.0, 0.0]).with_concept("c", vec![true, false, false]);
        let err = EmbeddingArchive::new(header(2, Split::Train), vec!["c".into()], vec![rec]).unwrap_err();
        assert_eq!(err.archive_kind(), Some(Kind::LabelLengthMismatch));
        let msg = err.to_string();
        assert!(msg.contains("label length mismatch"), "{msg}");
        assert!(msg.contains("s9"), "{msg}");
        assert!(msg.contains("samples[0].token_labels.c"), "{msg}");
    }

    #[test]
    fn token_label_without_sample_label_is_rejected() {
        let mut rec = SampleRecord::new("s0", vec![vec![0.0]; 2], vec![0.0]).with_concept("c", vec![false, true]);
        rec.sample_labels.insert("c".into(), false);
        let err = EmbeddingArchive::new(header(1, Split::Val), vec!["c".into()], vec![rec]).unwrap_err();
        assert_eq!(err.archive_kind(), Some(Kind::LabelConsistency));
        assert!(err.to_string().contains("label consistency"));
    }

    #[test]
    fn unknown_concept_and_dimension_errors() {
        let rec = SampleRecord::new("s0", vec![vec![0.0]], vec![0.0]).with_concept("zzz", vec![true]);
        let err = EmbeddingArchive::new(header(1, Split::Val), vec!["c".into()], vec![rec]).unwrap_err();
        assert_eq!(err.archive_kind(), Some(Kind::UnknownConcept));

        let rec = SampleRecord::new("s0", vec![vec![0.0, 1.0, 2.0]], vec![0.0, 0.0]);
        let err = EmbeddingArchive::new(header(2, Split::Val), vec![], vec![rec]).unwrap_err();
        assert_eq!(err.archive_kind(), Some(Kind::DimensionMismatch));
    }

    #[test]
    fn duplicate_ids_and_empty_samples() {
        let a = SampleRecord::new("x", vec![vec![0.0]], vec![0.0]);
        let err = EmbeddingArchive::new(header(1, Split::Val), vec![], vec![a.clone(), a]).unwrap_err();
        assert_eq!(err.archive_kind(), Some(Kind::DuplicateId));

        let err = EmbeddingArchive::new(header(1, Split::Val), vec!["c".into(), "c".into()], vec![]).unwrap_err();
        assert_eq!(err.archive_kind(), Some(Kind::DuplicateId));

        let empty = SampleRecord::new("e", vec![], vec![0.0]);
        assert!(EmbeddingArchive::new(header(1, Split::Val), vec![], vec![empty]).is_err());
    }

    #[test]
    fn non_finite_embedding_is_rejected() {
        let rec = SampleRecord::new("s0", vec![vec![0.0, f64::NAN]], vec![0.0, 0.0]);
        let err = EmbeddingArchive::new(header(2, Split::Val), vec![], vec![rec]).unwrap_err();
        assert_eq!(err.archive_kind(), Some(Kind::NonFinite));
        assert!(err.to_string().contains("samples[0].tokens[0][1]"));
    }
}
