// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error types shared by every module of the crate.

use std::path::PathBuf;

/// What went wrong while validating an archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchiveErrorKind {
    /// Manifest is not valid JSON or is missing/has ill-typed fields.
    MalformedManifest,
    /// A matrix or vector does not have `d` columns / entries.
    DimensionMismatch,
    /// A token label vector does not have `n_tokens` entries.
    LabelLengthMismatch,
    /// A token label is set while the sample label is not.
    LabelConsistency,
    /// A label references a concept id that is not declared.
    UnknownConcept,
    /// Two samples share an id, or a concept id is declared twice.
    DuplicateId,
    /// A byte offset or payload length disagrees with the manifest.
    OffsetMismatch,
    /// An embedding entry is NaN or infinite.
    NonFinite,
    /// A label byte is neither 0 nor 1.
    BadLabelByte,
    /// Normalisation statistics are inconsistent.
    BadNormStats,
}

impl ArchiveErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MalformedManifest => "malformed manifest",
            Self::DimensionMismatch => "dimension mismatch",
            Self::LabelLengthMismatch => "label length mismatch",
            Self::LabelConsistency => "label consistency",
            Self::UnknownConcept => "unknown concept id",
            Self::DuplicateId => "duplicate id",
            Self::OffsetMismatch => "offset mismatch",
            Self::NonFinite => "non-finite value",
            Self::BadLabelByte => "bad label byte",
            Self::BadNormStats => "bad normalisation statistics",
        }
    }
}

impl std::fmt::Display for ArchiveErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{kind} at {path}{}: {detail}", sample_suffix(.sample_id))]
    Archive {
        kind: ArchiveErrorKind,
        sample_id: Option<String>,
        /// Field path inside the archive, e.g. `samples[3].token_labels.dog`.
        path: String,
        detail: String,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("concept `{0}` not found")]
    UnknownConcept(String),

    #[error("no positive samples for concept `{0}`")]
    NoPositiveSamples(String),

    #[error("degenerate split for concept `{concept}`: {detail}")]
    DegenerateSplit { concept: String, detail: String },

    #[error("probe training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid concept-vector file: {0}")]
    ConceptFile(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn sample_suffix(sample_id: &Option<String>) -> String {
    match sample_id {
        Some(id) => format!(" (sample `{id}`)"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn archive(
        kind: ArchiveErrorKind,
        sample_id: Option<&str>,
        path: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        Self::Archive {
            kind,
            sample_id: sample_id.map(str::to_owned),
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// The archive error kind, if this is an archive validation failure.
    pub fn archive_kind(&self) -> Option<ArchiveErrorKind> {
        match self {
            Self::Archive { kind, .. } => Some(*kind),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
