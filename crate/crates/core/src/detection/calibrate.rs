// SPDX-License-Identifier: MIT OR Apache-2.0

//! Threshold and grid calibration on validation archives.
//!
//! Every routine scans its whole grid and keeps the first cell with strictly
//! higher F1, so ties resolve to the earliest cell in scan order:
//!
//! - SuperActivator: smaller `delta` first, then earlier layer.
//! - Baselines and fixed-tail: earlier layer first, then lower `tau`.

use crate::archive::EmbeddingArchive;
use crate::distributions::{distributions_from_scores, score_archive, SampleScores};
use crate::error::{Error, Result};
use crate::numeric::{f1_from_counts, Confusion};

use super::{sample_statistic, superactivator_threshold, CalibratedDetector, Strategy};

/// One layer's archive paired with the concept vector for that layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerInput<'a> {
    pub archive: &'a EmbeddingArchive,
    pub vector: &'a [f64],
}

impl<'a> LayerInput<'a> {
    pub fn new(archive: &'a EmbeddingArchive, vector: &'a [f64]) -> Self {
        Self { archive, vector }
    }
}

/// Which detector to calibrate.
#[derive(Debug, Clone, PartialEq)]
pub enum DetectorFamily {
    SuperActivator { delta_grid: Vec<f64> },
    Baseline { strategy: Strategy, seed: u64 },
    FixedTail { keep_fraction: f64 },
}

impl DetectorFamily {
    pub fn strategy(&self) -> Strategy {
        match self {
            Self::SuperActivator { .. } => Strategy::SuperAct,
            Self::Baseline { strategy, .. } => *strategy,
            Self::FixedTail { .. } => Strategy::FixedTail,
        }
    }
}

pub fn calibrate(family: &DetectorFamily, layers: &[LayerInput<'_>], concept_id: &str) -> Result<CalibratedDetector> {
    match family {
        DetectorFamily::SuperActivator { delta_grid } => calibrate_superactivator(layers, concept_id, delta_grid),
        DetectorFamily::Baseline { strategy, seed } => calibrate_baseline_threshold(layers, concept_id, *strategy, *seed),
        DetectorFamily::FixedTail { keep_fraction } => fixed_tail_detector(layers, concept_id, *keep_fraction),
    }
}

struct LayerData {
    layer_tag: String,
    concept_index: usize,
    scores: Vec<SampleScores>,
    labels: Vec<bool>,
}

fn prepare(layers: &[LayerInput<'_>], concept_id: &str) -> Result<Vec<LayerData>> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("layer grid is empty".into()));
    }
    layers
        .iter()
        .map(|l| {
            let ci = l.archive.require_concept(concept_id)?;
            let labels: Vec<bool> = l.archive.samples().iter().map(|s| s.sample_label(ci)).collect();
            let pos = labels.iter().filter(|&&b| b).count();
            if pos == 0 || pos == labels.len() {
                return Err(Error::DegenerateSplit {
                    concept: concept_id.to_owned(),
                    detail: format!(
                        "layer `{}` has {pos} positive and {} negative samples; both must be non-zero",
                        l.archive.layer_tag(),
                        labels.len() - pos
                    ),
                });
            }
            Ok(LayerData {
                layer_tag: l.archive.layer_tag().to_owned(),
                concept_index: ci,
                scores: score_archive(l.archive, l.vector)?,
                labels,
            })
        })
        .collect()
}

fn f1_at(stats: &[f64], labels: &[bool], tau: f64) -> f64 {
    Confusion::from_pairs(stats.iter().map(|&s| s >= tau).zip(labels.iter().copied())).f1()
}

/// Exhaustive `(layer, delta)` search for the SuperActivator detector.
pub fn calibrate_superactivator(layers: &[LayerInput<'_>], concept_id: &str, delta_grid: &[f64]) -> Result<CalibratedDetector> {
    if delta_grid.is_empty() {
        return Err(Error::InvalidArgument("sparsity grid is empty".into()));
    }
    if let Some(d) = delta_grid.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
        return Err(Error::InvalidArgument(format!("sparsity {d} is outside (0, 1]")));
    }
    let mut deltas = delta_grid.to_vec();
    deltas.sort_by(f64::total_cmp);
    deltas.dedup();

    let data = prepare(layers, concept_id)?;
    let mut per_layer = Vec::with_capacity(data.len());
    for (l, d) in layers.iter().zip(&data) {
        let d_in = distributions_from_scores(l.archive, d.concept_index, &d.scores).d_in;
        if d_in.is_empty() {
            return Err(Error::DegenerateSplit {
                concept: concept_id.to_owned(),
                detail: format!("layer `{}` has no in-concept tokens", d.layer_tag),
            });
        }
        let maxima: Vec<f64> = d.scores.iter().map(SampleScores::max_token).collect();
        per_layer.push((d_in, maxima));
    }

    let mut best: Option<(f64, usize, f64, f64)> = None; // (f1, layer, delta, tau)
    for &delta in &deltas {
        for (li, (d_in, maxima)) in per_layer.iter().enumerate() {
            let tau = superactivator_threshold(d_in, delta)?;
            let f1 = f1_at(maxima, &data[li].labels, tau);
            if best.map_or(true, |b| f1 > b.0) {
                best = Some((f1, li, delta, tau));
            }
        }
    }
    let (f1, li, delta, tau) = best.expect("non-empty grid");
    Ok(CalibratedDetector {
        concept_id: concept_id.to_owned(),
        strategy: Strategy::SuperAct,
        layer_tag: data[li].layer_tag.clone(),
        delta: Some(delta),
        tau,
        seed: None,
        calibration_f1: f1,
    })
}

/// Best threshold for "statistic >= tau" against binary labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdChoice {
    pub tau: f64,
    pub f1: f64,
}

/// Sweeps `tau` over `-inf`, the midpoints between consecutive distinct
/// statistics, and `+inf`; returns the lowest `tau` reaching the best F1.
pub fn best_threshold(stats: &[f64], labels: &[bool]) -> ThresholdChoice {
    sweep_threshold(stats, labels, 0)
}

/// [`best_threshold`] with `forced_fn` extra positives that are predicted
/// negative whatever `tau` is.
pub(crate) fn sweep_threshold(stats: &[f64], labels: &[bool], forced_fn: usize) -> ThresholdChoice {
    assert_eq!(stats.len(), labels.len());
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| stats[a].total_cmp(&stats[b]));
    // group equal statistics: (value, positives, negatives), ascending
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for &i in &order {
        let (p, n) = if labels[i] { (1, 0) } else { (0, 1) };
        match groups.last_mut() {
            Some(g) if g.0 == stats[i] => {
                g.1 += p;
                g.2 += n;
            }
            _ => groups.push((stats[i], p, n)),
        }
    }
    let total_pos = labels.iter().filter(|&&b| b).count();
    // candidate j predicts positive for groups j.. ; j = groups.len() is +inf
    let mut tp = total_pos;
    let mut fp = stats.len() - total_pos;
    let mut best = ThresholdChoice {
        tau: f64::NEG_INFINITY,
        f1: f1_from_counts(tp, fp, total_pos - tp + forced_fn),
    };
    for j in 1..=groups.len() {
        tp -= groups[j - 1].1;
        fp -= groups[j - 1].2;
        let f1 = f1_from_counts(tp, fp, total_pos - tp + forced_fn);
        if f1 > best.f1 {
            let tau = if j == groups.len() {
                f64::INFINITY
            } else {
                0.5 * (groups[j - 1].0 + groups[j].0)
            };
            best = ThresholdChoice { tau, f1 };
        }
    }
    best
}

/// Threshold sweep for the standard aggregators, with the layer chosen by
/// the same outer search. `seed` only matters for [`Strategy::Rand`].
pub fn calibrate_baseline_threshold(
    layers: &[LayerInput<'_>],
    concept_id: &str,
    strategy: Strategy,
    seed: u64,
) -> Result<CalibratedDetector> {
    if strategy.uses_delta() {
        return Err(Error::InvalidArgument(format!("`{strategy}` is not a baseline aggregator")));
    }
    let data = prepare(layers, concept_id)?;
    let mut best: Option<(ThresholdChoice, usize)> = None;
    for (li, (l, d)) in layers.iter().zip(&data).enumerate() {
        let stats = l
            .archive
            .samples()
            .iter()
            .zip(&d.scores)
            .map(|(s, sc)| sample_statistic(sc, strategy, seed, s.sample_id(), concept_id))
            .collect::<Result<Vec<f64>>>()?;
        let choice = best_threshold(&stats, &d.labels);
        if best.map_or(true, |b| choice.f1 > b.0.f1) {
            best = Some((choice, li));
        }
    }
    let (choice, li) = best.expect("non-empty layer grid");
    Ok(CalibratedDetector {
        concept_id: concept_id.to_owned(),
        strategy,
        layer_tag: data[li].layer_tag.clone(),
        delta: None,
        tau: choice.tau,
        seed: (strategy == Strategy::Rand).then_some(seed),
        calibration_f1: choice.f1,
    })
}

/// The `ceil(keep_fraction * n)` highest token scores, descending.
pub fn retained_scores(token_scores: &[f64], keep_fraction: f64) -> Vec<f64> {
    let n = token_scores.len();
    let keep = ((keep_fraction * n as f64) - 1e-12).ceil().clamp(1.0, n as f64) as usize;
    let mut sorted = token_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.truncate(keep.min(n));
    sorted
}

/// Weakly supervised tail detector: keeps each sample's top tokens and
/// learns one threshold from sample-level labels only. A sample is positive
/// when any retained token reaches the threshold. Token labels are never
/// read.
pub fn fixed_tail_detector(layers: &[LayerInput<'_>], concept_id: &str, keep_fraction: f64) -> Result<CalibratedDetector> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep fraction {keep_fraction} is outside (0, 1]"
        )));
    }
    let data = prepare(layers, concept_id)?;
    let mut best: Option<(ThresholdChoice, usize)> = None;
    for (li, d) in data.iter().enumerate() {
        // a sample fires iff its largest retained score clears tau
        let stats: Vec<f64> = d
            .scores
            .iter()
            .map(|sc| retained_scores(&sc.tokens, keep_fraction)[0])
            .collect();
        let choice = best_threshold(&stats, &d.labels);
        if best.map_or(true, |b| choice.f1 > b.0.f1) {
            best = Some((choice, li));
        }
    }
    let (choice, li) = best.expect("non-empty layer grid");
    Ok(CalibratedDetector {
        concept_id: concept_id.to_owned(),
        strategy: Strategy::FixedTail,
        layer_tag: data[li].layer_tag.clone(),
        delta: Some(keep_fraction),
        tau: choice.tau,
        seed: None,
        calibration_f1: choice.f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::{ArchiveHeader, Modality, SampleRecord, Split};
    use crate::detection::Strategy;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn archive(layer: &str, samples: Vec<(Vec<f64>, Vec<bool>, bool)>) -> EmbeddingArchive {
        let recs = samples
            .into_iter()
            .enumerate()
            .map(|(i, (toks, labels, pos))| {
                let n = toks.len() as f64;
                let cls = toks.iter().sum::<f64>() / n;
                let mut r = SampleRecord::new(format!("s{i}"), toks.into_iter().map(|t| vec![t]).collect(), vec![cls])
                    .with_concept("c", labels);
                r.sample_labels.insert("c".into(), pos);
                r
            })
            .collect();
        let h = ArchiveHeader {
            model_id: "toy".into(),
            modality: Modality::Text,
            layer_tag: layer.into(),
            dim: 1,
            split: Split::Val,
        };
        EmbeddingArchive::new(h, vec!["c".into()], recs).unwrap()
    }

    /// Random 1-d archive: positives carry an in-concept token with a shift.
    fn random_archive(rng: &mut impl Rng, layer: &str, shift: f64, n: usize) -> EmbeddingArchive {
        let samples = (0..n)
            .map(|i| {
                let len = rng.gen_range(1..8);
                let mut toks: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let pos = i % 2 == 0;
                let mut labels = vec![false; len];
                if pos {
                    let j = rng.gen_range(0..len);
                    labels[j] = true;
                    toks[j] += shift * rng.gen_range(0.0..2.0);
                }
                (toks, labels, pos)
            })
            .collect();
        archive(layer, samples)
    }

    #[test]
    fn separable_baseline() {
        let a = archive(
            "L",
            vec![
                (vec![2.0], vec![true], true),
                (vec![3.0], vec![true], true),
                (vec![0.0], vec![false], false),
                (vec![1.0], vec![false], false),
            ],
        );
        let d = calibrate_baseline_threshold(&[LayerInput::new(&a, &[1.0])], "c", Strategy::Mean, 0).unwrap();
        assert_eq!(d.calibration_f1, 1.0);
        assert!(d.tau > 1.0 && d.tau < 2.0);
        assert_eq!(d.tau, 1.5);
    }

    #[test]
    fn all_equal_aggregates_predict_everything_positive() {
        let labels = [true, false, false, true, false];
        let stats = [0.3; 5];
        let c = best_threshold(&stats, &labels);
        assert_eq!(c.tau, f64::NEG_INFINITY);
        let p = 2.0 / 5.0;
        assert!((c.f1 - 2.0 * p / (p + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn grid_of_one_cell() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = random_archive(&mut rng, "L", 3.0, 20);
        let d = calibrate_superactivator(&[LayerInput::new(&a, &[1.0])], "c", &[0.3]).unwrap();
        assert_eq!(d.layer_tag, "L");
        assert_eq!(d.delta, Some(0.3));
        d.validate().unwrap();
    }

    #[test]
    fn picks_the_layer_with_the_planted_tail() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let flat = random_archive(&mut rng, "25%", 0.0, 60);
        let tail = random_archive(&mut rng, "75%", 5.0, 60);
        let flat2 = random_archive(&mut rng, "100%", 0.0, 60);
        let layers = [
            LayerInput::new(&flat, &[1.0]),
            LayerInput::new(&tail, &[1.0]),
            LayerInput::new(&flat2, &[1.0]),
        ];
        let d = calibrate_superactivator(&layers, "c", &super::super::DEFAULT_DELTA_GRID).unwrap();
        assert_eq!(d.layer_tag, "75%");
    }

    #[test]
    fn degenerate_splits_are_rejected() {
        let a = archive("L", vec![(vec![1.0], vec![true], true), (vec![2.0], vec![true], true)]);
        let err = calibrate_superactivator(&[LayerInput::new(&a, &[1.0])], "c", &[0.1]).unwrap_err();
        assert!(matches!(err, Error::DegenerateSplit { .. }));
        assert!(calibrate_superactivator(&[], "c", &[0.1]).is_err());
        let b = archive("L", vec![(vec![1.0], vec![true], true), (vec![2.0], vec![false], false)]);
        assert!(calibrate_superactivator(&[LayerInput::new(&b, &[1.0])], "c", &[]).is_err());
        assert!(calibrate_baseline_threshold(&[LayerInput::new(&b, &[1.0])], "c", Strategy::SuperAct, 0).is_err());
    }

    #[test]
    fn retained_scores_ceil_rule() {
        assert_eq!(retained_scores(&[4.0], 0.1), vec![4.0]);
        assert_eq!(retained_scores(&[1.0, 5.0, 3.0], 0.5), vec![5.0, 3.0]);
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(retained_scores(&xs, 0.1), vec![9.0]);
        assert_eq!(retained_scores(&xs, 1.0).len(), 10);
    }

    #[test]
    fn fixed_tail_with_everything_kept_matches_max_calibration() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = random_archive(&mut rng, "L", 2.0, 40);
        let layer = [LayerInput::new(&a, &[1.0])];
        let ft = fixed_tail_detector(&layer, "c", 1.0).unwrap();
        // CLS is the token mean here, so it never exceeds the token maximum
        let mx = calibrate_baseline_threshold(&layer, "c", Strategy::Max, 0).unwrap();
        assert_eq!(ft.tau, mx.tau);
        assert_eq!(ft.calibration_f1, mx.calibration_f1);
        assert_eq!(ft.delta, Some(1.0));
    }

    proptest! {
        #[test]
        fn sweep_matches_exhaustive_oracle(
            stats in prop::collection::vec(-5i32..5, 1..40),
            labels in prop::collection::vec(any::<bool>(), 40),
        ) {
            let stats: Vec<f64> = stats.into_iter().map(f64::from).collect();
            let labels = &labels[..stats.len()];
            let got = best_threshold(&stats, labels);
            // oracle: every observed value and +inf as a ">=" threshold
            let mut cands: Vec<f64> = stats.clone();
            cands.push(f64::INFINITY);
            let oracle = cands.iter().map(|&t| {
                let mut c = Confusion::default();
                for (s, l) in stats.iter().zip(labels) { c.push(*s >= t, *l); }
                c.f1()
            }).fold(0.0, f64::max);
            prop_assert_eq!(got.f1, oracle);
            prop_assert_eq!(f1_at(&stats, labels, got.tau), got.f1);
        }
    }
}
