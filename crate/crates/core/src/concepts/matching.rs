// SPDX-License-Identifier: MIT OR Apache-2.0

//! Picks, for one labelled concept, the unsupervised candidate that detects
//! it best on validation data.

use super::ConceptVector;
use crate::archive::EmbeddingArchive;
use crate::detection::{calibrate, DetectorFamily, LayerInput};
use crate::error::{Error, Result};

/// Calibrates `family` for every candidate on `val` and returns the one with
/// the highest validation F1 (lowest candidate index on ties), relabelled
/// with `concept_id`. The winning F1 and index go into `train_meta`.
pub fn match_unsupervised_to_concept(
    candidates: &[ConceptVector],
    concept_id: &str,
    val: &EmbeddingArchive,
    family: &DetectorFamily,
) -> Result<ConceptVector> {
    if candidates.is_empty() {
        return Err(Error::Empty("no candidate vectors to match".into()));
    }
    let ci = val.require_concept(concept_id)?;
    if val.positive_count(ci) == 0 {
        return Err(Error::NoPositiveSamples(concept_id.to_owned()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        c.check_dim(val.dim())?;
        let det = calibrate(family, &[LayerInput::new(val, &c.values)], concept_id)?;
        if best.map_or(true, |b| det.calibration_f1 > b.1) {
            best = Some((i, det.calibration_f1));
        }
    }
    let (i, f1) = best.expect("non-empty candidates");
    let mut out = candidates[i].clone();
    out.train_meta.insert("candidate_id".into(), out.concept_id.clone().into());
    out.train_meta.insert("candidate_index".into(), i.into());
    out.train_meta.insert("match_val_f1".into(), f1.into());
    out.concept_id = concept_id.to_owned();
    Ok(out)
}
