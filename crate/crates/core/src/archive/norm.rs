// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-dimension z-scoring with statistics taken from the training split.
//!
//! Token and CLS embeddings are pooled into one set of statistics. A
//! dimension with zero spread gets scale 1.

use serde::{Deserialize, Serialize};

use super::{EmbeddingArchive, Split};
use crate::error::{ArchiveErrorKind as Kind, Error, Result};

/// Spread below this is treated as a constant dimension.
const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub source_split: Split,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub(crate) fn check(&self, dim: usize) -> Result<()> {
        for len in [self.mean.len(), self.scale.len()] {
            if len != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: len,
                });
            }
        }
        if self.source_split != Split::Train {
            return Err(Error::archive(
                Kind::BadNormStats,
                None,
                "norm_stats.source_split",
                "statistics must come from the train split",
            ));
        }
        if let Some(i) = self.scale.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::archive(
                Kind::BadNormStats,
                None,
                format!("norm_stats.scale[{i}]"),
                "scale entries must be finite and strictly positive",
            ));
        }
        if let Some(i) = self.mean.iter().position(|m| !m.is_finite()) {
            return Err(Error::archive(
                Kind::BadNormStats,
                None,
                format!("norm_stats.mean[{i}]"),
                "mean entries must be finite",
            ));
        }
        Ok(())
    }
}

/// Per-dimension mean and population standard deviation over every token
/// and CLS vector of a training archive (single-pass Welford update).
pub fn compute_norm_stats(train: &EmbeddingArchive) -> Result<NormStats> {
    if train.split() != Split::Train {
        return Err(Error::InvalidArgument(format!(
            "normalisation statistics need a train archive, got split `{}`",
            train.split()
        )));
    }
    let dim = train.dim();
    let mut count = 0usize;
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    for s in train.samples() {
        for row in s.tokens().chain(std::iter::once(s.cls())) {
            count += 1;
            let inv = 1.0 / count as f64;
            for ((mu, acc), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(row) {
                let delta = x - *mu;
                *mu += delta * inv;
                *acc += delta * (x - *mu);
            }
        }
    }
    if count < 2 {
        return Err(Error::Empty(format!(
            "archive has {count} embedding vectors; at least 2 are needed"
        )));
    }
    let scale = m2
        .iter()
        .map(|acc| {
            let std = (acc / count as f64).sqrt();
            if std < DEGENERATE_STD {
                1.0
            } else {
                std
            }
        })
        .collect();
    Ok(NormStats {
        mean,
        scale,
        source_split: Split::Train,
    })
}

/// Returns a copy of `archive` with every token and CLS vector replaced by
/// `(z - mean) / scale`. Labels are untouched. Applying twice shifts twice.
pub fn apply_normalization(archive: &EmbeddingArchive, stats: &NormStats) -> Result<EmbeddingArchive> {
    stats.check(archive.dim())?;
    let samples = archive
        .samples()
        .iter()
        .map(|s| {
            s.map_vectors(|row| {
                for ((x, m), sc) in row.iter_mut().zip(&stats.mean).zip(&stats.scale) {
                    *x = (*x - m) / sc;
                }
            })
        })
        .collect();
    Ok(archive.with_samples(samples, Some(stats.clone())))
}
