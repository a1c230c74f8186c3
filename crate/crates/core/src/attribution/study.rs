// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end comparison of attribution objectives on labelled archives.
//!
//! For each (method, objective) pair, maps are computed on the validation
//! split to pick a binarisation threshold, then on the test split, where
//! token-level F1 against the in-concept labels and insertion/deletion
//! scores are reported.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::methods::{
    direct_alignment, kernel_shap_attribution, lime_attribution, rise_attribution, LimeConfig, RiseConfig, ShapConfig,
};
use super::{
    attribution_f1, binarize, calibrate_binarization, insertion_deletion, superactivator_mean_embedding, Aggregation,
    AttributionMethod, Game, ObjectiveKind, TokenGame, ValMap,
};
use crate::archive::{EmbeddingArchive, Sample};
use crate::error::{Error, Result};
use crate::numeric::{dot, extended_f64, stream, Confusion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub methods: Vec<AttributionMethod>,
    pub objectives: Vec<ObjectiveKind>,
    pub aggregation: Aggregation,
    pub lime: LimeConfig,
    pub shap: ShapConfig,
    pub rise: RiseConfig,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            methods: AttributionMethod::ALL.to_vec(),
            objectives: vec![ObjectiveKind::GlobalVector, ObjectiveKind::SuperactivatorMean],
            aggregation: Aggregation::Mean,
            lime: LimeConfig::default(),
            shap: ShapConfig::default(),
            rise: RiseConfig::default(),
            seed: 0,
        }
    }
}

/// Attribution map of one test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub sample_id: String,
    pub concept_id: String,
    pub method: AttributionMethod,
    pub objective: ObjectiveKind,
    /// `None` when the objective is undefined (no SuperActivator).
    pub scores: Option<Vec<f64>>,
    #[serde(with = "extended_f64")]
    pub tau_bin: f64,
    pub predicted_mask: Vec<bool>,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insertion: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deletion: Option<f64>,
}

/// Aggregate over the test split for one (method, objective) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub concept_id: String,
    pub method: AttributionMethod,
    pub objective: ObjectiveKind,
    #[serde(with = "extended_f64")]
    pub tau_bin: f64,
    /// Token-level F1 pooled over every test sample.
    pub f1: f64,
    /// Mean per-sample F1 over concept-positive test samples.
    pub mean_positive_f1: f64,
    /// Means over maps whose objective is defined.
    pub insertion: f64,
    pub deletion: f64,
    pub n_maps: usize,
    pub n_suppressed: usize,
    pub n_unnormalized: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub maps: Vec<AttributionMap>,
}

struct SampleGames {
    global: TokenGame,
    local: Option<TokenGame>,
}

fn games(sample: &Sample, v: &[f64], tau_sa: f64, aggregation: Aggregation) -> Result<SampleGames> {
    let scores: Vec<f64> = sample.tokens().map(|z| dot(z, v)).collect();
    let global = TokenGame::from_alignments(scores.clone(), aggregation);
    let local = superactivator_mean_embedding(sample, &scores, tau_sa)?
        .map(|m| TokenGame::from_alignments(sample.tokens().map(|z| dot(z, &m)).collect(), aggregation));
    Ok(SampleGames { global, local })
}

fn explain(game: &dyn Game, method: AttributionMethod, cfg: &StudyConfig, sample_id: &str) -> Result<Vec<f64>> {
    // one stream per (method, sample): both objectives see the same draws
    let mut rng = stream(cfg.seed, &["attribution", method.as_str(), sample_id]);
    Ok(match method {
        AttributionMethod::Lime => lime_attribution(game, &cfg.lime, &mut rng)?.scores,
        AttributionMethod::KernelShap => kernel_shap_attribution(game, &cfg.shap, &mut rng)?.scores,
        AttributionMethod::Rise => rise_attribution(game, &cfg.rise, &mut rng)?,
        AttributionMethod::Direct => direct_alignment(game),
    })
}

type SplitMaps = Vec<Vec<Option<Vec<f64>>>>; // [pair][sample]

fn split_maps(
    archive: &EmbeddingArchive,
    v: &[f64],
    tau_sa: f64,
    pairs: &[(AttributionMethod, ObjectiveKind)],
    cfg: &StudyConfig,
) -> Result<(Vec<SampleGames>, SplitMaps)> {
    let games: Vec<SampleGames> = archive
        .samples()
        .par_iter()
        .map(|s| games(s, v, tau_sa, cfg.aggregation))
        .collect::<Result<_>>()?;
    let per_sample: Vec<Vec<Option<Vec<f64>>>> = archive
        .samples()
        .par_iter()
        .zip(&games)
        .map(|(s, g)| {
            pairs
                .iter()
                .map(|&(m, o)| {
                    let game = match o {
                        ObjectiveKind::GlobalVector => Some(&g.global),
                        ObjectiveKind::SuperactivatorMean => g.local.as_ref(),
                    };
                    game.map(|gm| explain(gm, m, cfg, s.sample_id())).transpose()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    // transpose to [pair][sample]
    let mut maps: SplitMaps = vec![Vec::with_capacity(per_sample.len()); pairs.len()];
    for row in per_sample {
        for (k, m) in row.into_iter().enumerate() {
            maps[k].push(m);
        }
    }
    Ok((games, maps))
}

/// Runs the attribution comparison for one concept.
///
/// `v` is the concept vector and `tau_sa` the SuperActivator threshold used
/// to build each sample's local target. Token labels of the archives are
/// the ground truth.
pub fn attribution_study(
    val: &EmbeddingArchive,
    test: &EmbeddingArchive,
    concept_id: &str,
    v: &[f64],
    tau_sa: f64,
    cfg: &StudyConfig,
) -> Result<StudyReport> {
    if cfg.methods.is_empty() || cfg.objectives.is_empty() {
        return Err(Error::InvalidArgument(
            "attribution study needs a method and an objective".into(),
        ));
    }
    for a in [val, test] {
        if a.dim() != v.len() {
            return Err(Error::DimensionMismatch {
                expected: a.dim(),
                actual: v.len(),
            });
        }
    }
    if tau_sa.is_nan() {
        return Err(Error::InvalidArgument("SuperActivator threshold is NaN".into()));
    }
    let vci = val.require_concept(concept_id)?;
    let tci = test.require_concept(concept_id)?;
    let pairs: Vec<(AttributionMethod, ObjectiveKind)> = cfg
        .methods
        .iter()
        .flat_map(|&m| cfg.objectives.iter().map(move |&o| (m, o)))
        .collect();

    let (_, val_maps) = split_maps(val, v, tau_sa, &pairs, cfg)?;
    let (test_games, test_maps) = split_maps(test, v, tau_sa, &pairs, cfg)?;

    let mut rows = Vec::with_capacity(pairs.len());
    let mut out_maps = Vec::new();
    for (k, &(method, objective)) in pairs.iter().enumerate() {
        let vm: Vec<ValMap<'_>> = val
            .samples()
            .iter()
            .zip(&val_maps[k])
            .map(|(s, m)| ValMap {
                scores: m.as_deref(),
                truth: s.token_labels(vci),
            })
            .collect();
        let tau_bin = calibrate_binarization(&vm)?;

        let mut pooled = Confusion::default();
        let mut pos_f1 = Vec::new();
        let (mut ins, mut del) = (Vec::new(), Vec::new());
        let (mut n_suppressed, mut n_unnormalized) = (0, 0);
        for ((s, m), g) in test.samples().iter().zip(&test_maps[k]).zip(&test_games) {
            let truth = s.token_labels(tci);
            let mask = binarize(m.as_deref(), s.n_tokens(), tau_bin);
            mask.iter().zip(truth).for_each(|(&p, &t)| pooled.push(p, t));
            let f1 = attribution_f1(&mask, truth)?;
            if s.sample_label(tci) {
                pos_f1.push(f1);
            }
            let game = match objective {
                ObjectiveKind::GlobalVector => Some(&g.global),
                ObjectiveKind::SuperactivatorMean => g.local.as_ref(),
            };
            let faith = match (m, game) {
                (Some(sc), Some(gm)) => Some(insertion_deletion(gm, sc)?),
                _ => None,
            };
            if let Some(f) = &faith {
                ins.push(f.insertion);
                del.push(f.deletion);
                n_unnormalized += usize::from(!f.normalized);
            } else {
                n_suppressed += 1;
            }
            out_maps.push(AttributionMap {
                sample_id: s.sample_id().to_owned(),
                concept_id: concept_id.to_owned(),
                method,
                objective,
                scores: m.clone(),
                tau_bin,
                predicted_mask: mask,
                f1,
                insertion: faith.as_ref().map(|f| f.insertion),
                deletion: faith.as_ref().map(|f| f.deletion),
            });
        }
        let mean = |xs: &[f64]| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        rows.push(StudyRow {
            concept_id: concept_id.to_owned(),
            method,
            objective,
            tau_bin,
            f1: pooled.f1(),
            mean_positive_f1: mean(&pos_f1),
            insertion: mean(&ins),
            deletion: mean(&del),
            n_maps: test.samples().len(),
            n_suppressed,
            n_unnormalized,
        });
    }
    Ok(StudyReport { rows, maps: out_maps })
}
