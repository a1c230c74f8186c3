// SPDX-License-Identifier: MIT OR Apache-2.0

//! Test-split scoring of calibrated detectors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::EmbeddingArchive;
use crate::distributions::score_archive;
use crate::error::{Error, Result};
use crate::numeric::{stream, Confusion};

use super::{sample_statistic, CalibratedDetector, Strategy};

/// Bootstrap replicates behind the weighted-F1 standard error.
pub const BOOTSTRAP_REPLICATES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub sample_id: String,
    pub concept_id: String,
    pub statistic: f64,
    pub predicted: bool,
    pub truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDetection {
    pub concept_id: String,
    pub strategy: Strategy,
    pub layer_tag: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Positive test samples; the weight in the averaged F1 is proportional.
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub concepts: Vec<ConceptDetection>,
    /// Mean per-concept F1 weighted by positive frequency on the test split.
    pub weighted_f1: f64,
    /// Standard deviation of `weighted_f1` over sample-level bootstrap draws.
    pub weighted_f1_stderr: f64,
    pub predictions: Vec<SamplePrediction>,
}

struct Scored {
    preds: Vec<bool>,
    truth: Vec<bool>,
}

fn weighted(f1s: &[f64], supports: &[usize]) -> f64 {
    let total: usize = supports.iter().sum();
    if total == 0 {
        return 0.0;
    }
    f1s.iter().zip(supports).map(|(f, &s)| f * s as f64).sum::<f64>() / total as f64
}

/// Scores each `(detector, concept vector)` pair on the test archive whose
/// layer tag matches the detector's. All test archives must list the same
/// samples in the same order so that bootstrap draws are shared.
pub fn evaluate_detection(
    test_archives: &[EmbeddingArchive],
    detectors: &[(CalibratedDetector, Vec<f64>)],
    seed: u64,
) -> Result<DetectionResult> {
    if detectors.is_empty() {
        return Err(Error::InvalidArgument("no detectors to evaluate".into()));
    }
    let n = test_archives.first().map_or(0, |a| a.samples().len());
    for a in test_archives {
        let same = a.samples().len() == n
            && a.samples()
                .iter()
                .zip(test_archives[0].samples())
                .all(|(x, y)| x.sample_id() == y.sample_id());
        if !same {
            return Err(Error::InvalidArgument(format!(
                "test archive for layer `{}` lists different samples than layer `{}`",
                a.layer_tag(),
                test_archives[0].layer_tag()
            )));
        }
    }

    let mut concepts = Vec::with_capacity(detectors.len());
    let mut predictions = Vec::new();
    let mut scored = Vec::with_capacity(detectors.len());
    for (det, v) in detectors {
        det.validate()?;
        let archive = test_archives
            .iter()
            .find(|a| a.layer_tag() == det.layer_tag)
            .ok_or_else(|| Error::InvalidArgument(format!("no test archive for layer `{}`", det.layer_tag)))?;
        let ci = archive.require_concept(&det.concept_id)?;
        let scores = score_archive(archive, v)?;
        let mut s = Scored {
            preds: Vec::with_capacity(n),
            truth: Vec::with_capacity(n),
        };
        for (sample, sc) in archive.samples().iter().zip(&scores) {
            let stat = sample_statistic(sc, det.strategy, det.seed.unwrap_or(0), sample.sample_id(), &det.concept_id)?;
            let predicted = stat >= det.tau;
            let truth = sample.sample_label(ci);
            s.preds.push(predicted);
            s.truth.push(truth);
            predictions.push(SamplePrediction {
                sample_id: sample.sample_id().to_owned(),
                concept_id: det.concept_id.clone(),
                statistic: stat,
                predicted,
                truth,
            });
        }
        let c = Confusion::from_pairs(s.preds.iter().copied().zip(s.truth.iter().copied()));
        concepts.push(ConceptDetection {
            concept_id: det.concept_id.clone(),
            strategy: det.strategy,
            layer_tag: det.layer_tag.clone(),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            support: c.tp + c.fn_,
        });
        scored.push(s);
    }

    let f1s: Vec<f64> = concepts.iter().map(|c| c.f1).collect();
    let supports: Vec<usize> = concepts.iter().map(|c| c.support).collect();
    let weighted_f1 = weighted(&f1s, &supports);
    let weighted_f1_stderr = bootstrap_stderr(&scored, n, seed);

    Ok(DetectionResult {
        concepts,
        weighted_f1,
        weighted_f1_stderr,
        predictions,
    })
}

fn bootstrap_stderr(scored: &[Scored], n: usize, seed: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut rng = stream(seed, &["detection-bootstrap"]);
    let mut draws = Vec::with_capacity(BOOTSTRAP_REPLICATES);
    let mut idx = vec![0usize; n];
    for _ in 0..BOOTSTRAP_REPLICATES {
        idx.iter_mut().for_each(|i| *i = rng.gen_range(0..n));
        let (f1s, supports): (Vec<f64>, Vec<usize>) = scored
            .iter()
            .map(|s| {
                let c = Confusion::from_pairs(idx.iter().map(|&i| (s.preds[i], s.truth[i])));
                (c.f1(), c.tp + c.fn_)
            })
            .unzip();
        draws.push(weighted(&f1s, &supports));
    }
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
    var.sqrt()
}
