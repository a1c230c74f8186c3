// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token attribution for a concept under two objectives: alignment with the
//! global concept vector, or with the mean of the sample's own
//! SuperActivator embeddings.
//!
//! Perturbation works at the embedding level. A masked-out token is
//! replaced by the zero embedding, and the objective aggregates
//! `<z_i, target>` over all token positions of the perturbed sample. Under
//! the default mean aggregation the objective is therefore additive in the
//! retained tokens.

mod methods;
mod study;

use serde::{Deserialize, Serialize};

use crate::archive::Sample;
use crate::detection::sweep_threshold;
use crate::error::{Error, Result};
use crate::numeric::{checked_dot, Confusion};

pub use methods::{
    direct_alignment, kernel_shap_attribution, lime_attribution, rise_attribution, LimeConfig, LimeFit, RiseConfig, ShapConfig,
    ShapFit,
};
pub use study::{attribution_study, AttributionMap, StudyConfig, StudyReport, StudyRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    GlobalVector,
    SuperactivatorMean,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::GlobalVector => "global_vector",
            Self::SuperactivatorMean => "superactivator_mean",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselinePolicy {
    #[default]
    ZeroEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    Lime,
    KernelShap,
    Rise,
    Direct,
}

impl AttributionMethod {
    pub const ALL: [AttributionMethod; 4] = [Self::Lime, Self::KernelShap, Self::Rise, Self::Direct];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lime => "lime",
            Self::KernelShap => "kernel_shap",
            Self::Rise => "rise",
            Self::Direct => "direct",
        }
    }
}

impl std::str::FromStr for AttributionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attribution method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionObjective {
    pub kind: ObjectiveKind,
    pub target: Vec<f64>,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub baseline_policy: BaselinePolicy,
}

impl AttributionObjective {
    pub fn global(target: Vec<f64>) -> Self {
        Self {
            kind: ObjectiveKind::GlobalVector,
            target,
            aggregation: Aggregation::Mean,
            baseline_policy: BaselinePolicy::ZeroEmbedding,
        }
    }

    pub fn superactivator_mean(target: Vec<f64>) -> Self {
        Self {
            kind: ObjectiveKind::SuperactivatorMean,
            ..Self::global(target)
        }
    }

    pub fn with_aggregation(mut self, aggregation: Aggregation) -> Self {
        self.aggregation = aggregation;
        self
    }
}

/// A set function over token subsets, the black box every attribution
/// method queries. `mask[i]` is true when token `i` is kept.
pub trait Game: Sync {
    fn n(&self) -> usize;
    fn value(&self, mask: &[bool]) -> f64;
}

/// The objective of one sample, with per-token alignments precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGame {
    alignments: Vec<f64>,
    aggregation: Aggregation,
}

impl TokenGame {
    pub fn new(sample: &Sample, objective: &AttributionObjective) -> Result<Self> {
        let alignments = sample
            .tokens()
            .map(|z| checked_dot(z, &objective.target))
            .collect::<Result<_>>()?;
        Ok(Self {
            alignments,
            aggregation: objective.aggregation,
        })
    }

    pub fn from_alignments(alignments: Vec<f64>, aggregation: Aggregation) -> Self {
        Self { alignments, aggregation }
    }

    pub fn alignments(&self) -> &[f64] {
        &self.alignments
    }
}

impl Game for TokenGame {
    fn n(&self) -> usize {
        self.alignments.len()
    }

    fn value(&self, mask: &[bool]) -> f64 {
        debug_assert_eq!(mask.len(), self.alignments.len());
        let n = self.alignments.len();
        if n == 0 || !mask.contains(&true) {
            return 0.0;
        }
        // masked positions hold the zero embedding, whose alignment is 0
        let kept = self.alignments.iter().zip(mask).map(|(a, &m)| if m { *a } else { 0.0 });
        match self.aggregation {
            Aggregation::Mean => kept.sum::<f64>() / n as f64,
            Aggregation::Max => kept.fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Objective of `sample` with only the `retained` tokens kept.
pub fn objective_value(sample: &Sample, retained: &[bool], objective: &AttributionObjective) -> Result<f64> {
    if retained.len() != sample.n_tokens() {
        return Err(Error::DimensionMismatch {
            expected: sample.n_tokens(),
            actual: retained.len(),
        });
    }
    Ok(TokenGame::new(sample, objective)?.value(retained))
}

/// Mean embedding of the tokens scoring at least `tau`; `None` when the
/// sample holds no SuperActivator.
pub fn superactivator_mean_embedding(sample: &Sample, token_scores: &[f64], tau: f64) -> Result<Option<Vec<f64>>> {
    if token_scores.len() != sample.n_tokens() {
        return Err(Error::DimensionMismatch {
            expected: sample.n_tokens(),
            actual: token_scores.len(),
        });
    }
    Ok(crate::numeric::mean_rows(
        sample.tokens().zip(token_scores).filter(|(_, &s)| s >= tau).map(|(z, _)| z),
        sample.dim(),
    ))
}

/// Token-level F1 of a predicted mask. An empty prediction against an empty
/// truth counts as a perfect match.
pub fn attribution_f1(predicted: &[bool], truth: &[bool]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: predicted.len(),
        });
    }
    let c = Confusion::from_pairs(predicted.iter().copied().zip(truth.iter().copied()));
    if c.tp + c.fp + c.fn_ == 0 {
        return Ok(1.0);
    }
    Ok(c.f1())
}

/// One validation map for threshold calibration; `scores = None` marks a
/// suppressed map whose tokens are all predicted negative.
#[derive(Debug, Clone, Copy)]
pub struct ValMap<'a> {
    pub scores: Option<&'a [f64]>,
    pub truth: &'a [bool],
}

/// Threshold maximising pooled token-level F1 over the validation maps.
/// Candidates are `-inf`, midpoints of the sorted distinct scores and
/// `+inf`; ties resolve to the lower threshold.
pub fn calibrate_binarization(val_maps: &[ValMap<'_>]) -> Result<f64> {
    let mut stats = Vec::new();
    let mut labels = Vec::new();
    let mut forced_fn = 0;
    for m in val_maps {
        match m.scores {
            Some(s) => {
                if s.len() != m.truth.len() {
                    return Err(Error::DimensionMismatch {
                        expected: m.truth.len(),
                        actual: s.len(),
                    });
                }
                if s.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidArgument("attribution scores must be finite".into()));
                }
                stats.extend_from_slice(s);
                labels.extend_from_slice(m.truth);
            }
            None => forced_fn += m.truth.iter().filter(|&&t| t).count(),
        }
    }
    Ok(sweep_threshold(&stats, &labels, forced_fn).tau)
}

/// `scores >= tau`, or all false for a suppressed map.
pub fn binarize(scores: Option<&[f64]>, n: usize, tau: f64) -> Vec<bool> {
    match scores {
        Some(s) => s.iter().map(|&x| x >= tau).collect(),
        None => vec![false; n],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessScores {
    pub insertion: f64,
    pub deletion: f64,
    /// False when the full objective is not positive and the curves are
    /// reported without normalisation.
    pub normalized: bool,
    pub insertion_curve: Vec<f64>,
    pub deletion_curve: Vec<f64>,
}

/// Token indices by descending score, lower index first on ties.
pub fn attribution_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Insertion and deletion curves in attribution order, one step per token.
/// Each score is the curve mean over `f(full)`, clamped to `[0, 1]`.
pub fn insertion_deletion(game: &dyn Game, scores: &[f64]) -> Result<FaithfulnessScores> {
    let n = game.n();
    if scores.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: scores.len(),
        });
    }
    if n == 0 {
        return Err(Error::Empty("faithfulness over zero tokens".into()));
    }
    let order = attribution_order(scores);
    let mut mask = vec![false; n];
    let mut insertion_curve = Vec::with_capacity(n);
    for &i in &order {
        mask[i] = true;
        insertion_curve.push(game.value(&mask));
    }
    let mut deletion_curve = Vec::with_capacity(n);
    for &i in &order {
        mask[i] = false;
        deletion_curve.push(game.value(&mask));
    }
    let full = game.value(&vec![true; n]);
    let mean = |c: &[f64]| c.iter().sum::<f64>() / c.len() as f64;
    let normalized = full > 0.0;
    let norm = |c: &[f64]| {
        if normalized {
            (mean(c) / full).clamp(0.0, 1.0)
        } else {
            mean(c)
        }
    };
    if !normalized {
        log::debug!("objective on the full sample is {full}; faithfulness left unnormalised");
    }
    Ok(FaithfulnessScores {
        insertion: norm(&insertion_curve),
        deletion: norm(&deletion_curve),
        normalized,
        insertion_curve,
        deletion_curve,
    })
}
