// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sample-level concept detection.
//!
//! A detector collapses a sample's token scores with an aggregation strategy
//! and compares the result against a calibrated threshold `tau`
//! (`aggregate >= tau` means "concept present").
//!
//! The SuperActivator detector takes `tau` as the `(1 - delta)` nearest-rank
//! quantile of the validation in-concept token scores and predicts presence
//! when the sample's largest *token* score reaches it, i.e. when the sample
//! holds at least one SuperActivator. The plain max aggregator also looks at
//! the CLS score; the SuperActivator detector does not.

mod calibrate;
mod evaluate;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::distributions::{nearest_rank, select_rank, SampleScores};
use crate::error::{Error, Result};
use crate::numeric::{extended_f64, stream};

pub(crate) use calibrate::sweep_threshold;
pub use calibrate::{
    best_threshold, calibrate, calibrate_baseline_threshold, calibrate_superactivator, fixed_tail_detector, retained_scores,
    DetectorFamily, LayerInput, ThresholdChoice,
};
pub use evaluate::{evaluate_detection, ConceptDetection, DetectionResult, SamplePrediction};

/// Sparsity levels searched when no grid is given.
pub const DEFAULT_DELTA_GRID: [f64; 9] = [0.02, 0.05, 0.10, 0.20, 0.30, 0.40, 0.50, 0.75, 1.0];

/// Per-sample fraction of top tokens kept by the fixed-tail detector.
pub const DEFAULT_KEEP_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Cls,
    Mean,
    Max,
    Last,
    Rand,
    #[serde(rename = "superact")]
    SuperAct,
    FixedTail,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Cls,
        Strategy::Mean,
        Strategy::Max,
        Strategy::Last,
        Strategy::Rand,
        Strategy::SuperAct,
        Strategy::FixedTail,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Cls => "cls",
            Strategy::Mean => "mean",
            Strategy::Max => "max",
            Strategy::Last => "last",
            Strategy::Rand => "rand",
            Strategy::SuperAct => "superact",
            Strategy::FixedTail => "fixed_tail",
        }
    }

    /// Whether detectors of this strategy carry a sparsity level.
    pub fn uses_delta(self) -> bool {
        matches!(self, Strategy::SuperAct | Strategy::FixedTail)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}`")))
    }
}

/// A threshold detector selected on validation data.
///
/// `tau` may be `-inf` (predict every sample positive) when a baseline
/// sweep finds that optimal; it is serialised as the string `"-inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedDetector {
    pub concept_id: String,
    pub strategy: Strategy,
    pub layer_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(with = "extended_f64")]
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub calibration_f1: f64,
}

impl CalibratedDetector {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() {
            return Err(Error::InvalidArgument("detector threshold is NaN".into()));
        }
        match (self.strategy.uses_delta(), self.delta) {
            (true, Some(d)) if d > 0.0 && d <= 1.0 => {}
            (true, Some(d)) => {
                return Err(Error::InvalidArgument(format!("sparsity {d} is outside (0, 1]")));
            }
            (true, None) => {
                return Err(Error::InvalidArgument(format!(
                    "`{}` detector needs a sparsity level",
                    self.strategy
                )));
            }
            (false, Some(_)) => {
                return Err(Error::InvalidArgument(format!(
                    "`{}` detector must not carry a sparsity level",
                    self.strategy
                )));
            }
            (false, None) => {}
        }
        if self.strategy == Strategy::Rand && self.seed.is_none() {
            return Err(Error::InvalidArgument("`rand` detector needs a seed".into()));
        }
        if !(0.0..=1.0).contains(&self.calibration_f1) {
            return Err(Error::InvalidArgument(format!(
                "calibration F1 {} is outside [0, 1]",
                self.calibration_f1
            )));
        }
        Ok(())
    }
}

/// Collapses one sample's scores to a scalar.
///
/// `rng` is only consumed by [`Strategy::Rand`], which fails without one.
/// `SuperAct` and `FixedTail` both reduce to the maximum token score.
pub fn aggregate(token_scores: &[f64], cls_score: f64, strategy: Strategy, rng: Option<&mut dyn RngCore>) -> Result<f64> {
    if token_scores.is_empty() {
        return Err(Error::Empty("aggregation over zero token scores".into()));
    }
    let token_max = || token_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(match strategy {
        Strategy::Cls => cls_score,
        Strategy::Mean => token_scores.iter().sum::<f64>() / token_scores.len() as f64,
        Strategy::Max => token_max().max(cls_score),
        Strategy::Last => token_scores[token_scores.len() - 1],
        Strategy::Rand => {
            let rng = rng.ok_or_else(|| Error::InvalidArgument("`rand` aggregation needs a generator".into()))?;
            token_scores[rng.gen_range(0..token_scores.len())]
        }
        Strategy::SuperAct | Strategy::FixedTail => token_max(),
    })
}

/// Generator for the `rand` aggregator, keyed by `(seed, sample, concept)`
/// so a sample draws the same token index on every evaluation.
pub fn rand_stream(seed: u64, sample_id: &str, concept_id: &str) -> crate::numeric::StreamRng {
    stream(seed, &["rand-aggregator", sample_id, concept_id])
}

/// Aggregate for one sample, deriving the `rand` generator when needed.
pub(crate) fn sample_statistic(
    scores: &SampleScores,
    strategy: Strategy,
    seed: u64,
    sample_id: &str,
    concept_id: &str,
) -> Result<f64> {
    if strategy == Strategy::Rand {
        let mut rng = rand_stream(seed, sample_id, concept_id);
        aggregate(&scores.tokens, scores.cls, strategy, Some(&mut rng))
    } else {
        aggregate(&scores.tokens, scores.cls, strategy, None)
    }
}

/// `tau = Q_{1-delta}` of the validation in-concept token scores under the
/// nearest-rank convention; `delta = 1` gives the minimum score.
pub fn superactivator_threshold(scores: &[f64], delta: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("SuperActivator threshold over zero in-concept scores".into()));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!("sparsity {delta} is outside (0, 1]")));
    }
    Ok(select_rank(scores, nearest_rank(scores.len(), 1.0 - delta)))
}

/// Applies a calibrated detector to one sample's scores.
pub fn detect_sample(scores: &SampleScores, detector: &CalibratedDetector, sample_id: &str) -> Result<bool> {
    let stat = sample_statistic(
        scores,
        detector.strategy,
        detector.seed.unwrap_or(0),
        sample_id,
        &detector.concept_id,
    )?;
    Ok(stat >= detector.tau)
}
