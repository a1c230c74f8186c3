// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation scores and the in-/out-of-concept score distributions.
//!
//! For a concept `c` and vector `v`, a token's activation score is `<z, v>`.
//! `D_in` collects the scores of tokens labelled in-concept. `D_out` collects
//! the scores of every token of samples that do *not* contain `c`.
//! Unlabelled tokens inside concept-positive samples go into neither set,
//! because attention lets concept information leak into them.
//!
//! CLS scores never enter either distribution.

use serde::Serialize;

use crate::archive::{EmbeddingArchive, Sample};
use crate::error::{Error, Result};
use crate::numeric::{checked_dot, dot};

/// Default upper quantile of `D_out` used for separation and coverage.
pub const DEFAULT_SEPARATION_Q: f64 = 0.98;

/// `<z, v>`.
pub fn activation_score(z: &[f64], v: &[f64]) -> Result<f64> {
    checked_dot(z, v)
}

/// Per-token and CLS activation scores of one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleScores {
    pub tokens: Vec<f64>,
    pub cls: f64,
}

impl SampleScores {
    pub fn max_token(&self) -> f64 {
        self.tokens.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn score_sample(sample: &Sample, v: &[f64]) -> Result<SampleScores> {
    if v.len() != sample.dim() {
        return Err(Error::DimensionMismatch {
            expected: sample.dim(),
            actual: v.len(),
        });
    }
    Ok(SampleScores {
        tokens: sample.tokens().map(|z| dot(z, v)).collect(),
        cls: dot(sample.cls(), v),
    })
}

/// Scores every sample of an archive against `v`, in archive order.
pub fn score_archive(archive: &EmbeddingArchive, v: &[f64]) -> Result<Vec<SampleScores>> {
    archive.samples().iter().map(|s| score_sample(s, v)).collect()
}

/// Location of a token inside an archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TokenRef {
    pub sample: usize,
    pub token: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationDistribution {
    pub concept_id: String,
    pub layer_tag: String,
    pub d_in: Vec<f64>,
    pub d_out: Vec<f64>,
    /// `in_sources[i]` produced `d_in[i]`.
    pub in_sources: Vec<TokenRef>,
    pub out_sources: Vec<TokenRef>,
    /// Ids of samples contributing at least one score to `d_in` / `d_out`.
    pub in_samples: Vec<String>,
    pub out_samples: Vec<String>,
}

pub fn build_distributions(archive: &EmbeddingArchive, concept_id: &str, v: &[f64]) -> Result<ActivationDistribution> {
    let ci = archive.require_concept(concept_id)?;
    let scores = score_archive(archive, v)?;
    Ok(distributions_from_scores(archive, ci, &scores))
}

pub(crate) fn distributions_from_scores(
    archive: &EmbeddingArchive,
    ci: usize,
    scores: &[SampleScores],
) -> ActivationDistribution {
    let mut dist = ActivationDistribution {
        concept_id: archive.concepts()[ci].clone(),
        layer_tag: archive.layer_tag().to_owned(),
        d_in: Vec::new(),
        d_out: Vec::new(),
        in_sources: Vec::new(),
        out_sources: Vec::new(),
        in_samples: Vec::new(),
        out_samples: Vec::new(),
    };
    for (si, (sample, sc)) in archive.samples().iter().zip(scores).enumerate() {
        if sample.sample_label(ci) {
            let mut any = false;
            for (ti, (&label, &s)) in sample.token_labels(ci).iter().zip(&sc.tokens).enumerate() {
                if label {
                    dist.d_in.push(s);
                    dist.in_sources.push(TokenRef { sample: si, token: ti });
                    any = true;
                }
            }
            if any {
                dist.in_samples.push(sample.sample_id().to_owned());
            }
        } else {
            for (ti, &s) in sc.tokens.iter().enumerate() {
                dist.d_out.push(s);
                dist.out_sources.push(TokenRef { sample: si, token: ti });
            }
            dist.out_samples.push(sample.sample_id().to_owned());
        }
    }
    dist
}

/// 1-based nearest rank `ceil(q n)`, clamped to `[1, n]`.
///
/// The product is nudged down by a relative 1e-12 so that `q n` values which
/// are integers in exact arithmetic (0.9 × 10) are not pushed up a rank by
/// binary rounding.
pub(crate) fn nearest_rank(n: usize, q: f64) -> usize {
    let x = q * n as f64;
    let r = (x - x.abs() * 1e-12).ceil();
    (r.max(1.0) as usize).min(n)
}

/// Nearest-rank empirical quantile: the element at 1-based rank `ceil(q n)`
/// of the ascending order. Always returns an element of `scores`.
pub fn empirical_quantile(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("quantile of an empty multiset".into()));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {q} is outside (0, 1]")));
    }
    Ok(select_rank(scores, nearest_rank(scores.len(), q)))
}

/// k-th smallest (1-based) by selection, without sorting the whole slice.
pub(crate) fn select_rank(scores: &[f64], rank: usize) -> f64 {
    let mut buf = scores.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *kth
}

/// Fraction of `d_in` strictly above the `q`-quantile of `d_out`.
pub fn separation_fraction(dist: &ActivationDistribution, q: f64) -> Result<f64> {
    if dist.d_in.is_empty() || dist.d_out.is_empty() {
        return Err(Error::Empty(format!(
            "separation needs non-empty D_in and D_out (|D_in| = {}, |D_out| = {})",
            dist.d_in.len(),
            dist.d_out.len()
        )));
    }
    let cut = empirical_quantile(&dist.d_out, q)?;
    let above = dist.d_in.iter().filter(|&&s| s > cut).count();
    Ok(above as f64 / dist.d_in.len() as f64)
}

/// Fraction of concept-positive samples with at least one token scoring
/// strictly above the `q`-quantile of `D_out`.
pub fn sample_coverage(archive: &EmbeddingArchive, concept_id: &str, v: &[f64], q: f64) -> Result<f64> {
    let ci = archive.require_concept(concept_id)?;
    let scores = score_archive(archive, v)?;
    coverage_from_scores(archive, ci, &scores, q)
}

pub(crate) fn coverage_from_scores(archive: &EmbeddingArchive, ci: usize, scores: &[SampleScores], q: f64) -> Result<f64> {
    let dist = distributions_from_scores(archive, ci, scores);
    let positives = archive.positive_count(ci);
    if positives == 0 {
        return Err(Error::NoPositiveSamples(archive.concepts()[ci].clone()));
    }
    if dist.d_out.is_empty() {
        return Err(Error::Empty("coverage needs at least one negative sample".into()));
    }
    let cut = empirical_quantile(&dist.d_out, q)?;
    let covered = archive
        .samples()
        .iter()
        .zip(scores)
        .filter(|(s, _)| s.sample_label(ci))
        .filter(|(_, sc)| sc.tokens.iter().any(|&t| t > cut))
        .count();
    Ok(covered as f64 / positives as f64)
}

/// Fixed-edge histogram. `counts[i]` covers `[edges[i], edges[i+1])`; the
/// last bin is closed on the right.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    pub fn with_edges(edges: Vec<f64>) -> Self {
        assert!(edges.len() >= 2, "histogram needs at least one bin");
        let bins = edges.len() - 1;
        Self {
            edges,
            counts: vec![0; bins],
            total: 0,
        }
    }

    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let w = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|i| lo + w * i as f64).collect();
        edges.push(hi);
        Self::with_edges(edges)
    }

    pub fn add(&mut self, x: f64) {
        let last = self.counts.len() - 1;
        if x < self.edges[0] || x > self.edges[last + 1] {
            return;
        }
        let idx = self.edges[1..].partition_point(|&e| e <= x).min(last);
        self.counts[idx] += 1;
        self.total += 1;
    }
}

/// Histograms of `D_in` and `D_out` over shared edges spanning both sets.
pub fn score_histograms(dist: &ActivationDistribution, bins: usize) -> (Histogram, Histogram) {
    let all = dist.d_in.iter().chain(&dist.d_out);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let mut h_in = Histogram::uniform(lo, hi, bins);
    let mut h_out = Histogram::with_edges(h_in.edges.clone());
    dist.d_in.iter().for_each(|&s| h_in.add(s));
    dist.d_out.iter().for_each(|&s| h_out.add(s));
    (h_in, h_out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CdfPoint {
    pub value: f64,
    pub fraction: f64,
}

/// Empirical CDF at each distinct value; non-decreasing and ending at 1.
pub fn empirical_cdf(values: &[f64]) -> Vec<CdfPoint> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let fraction = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.value == v => last.fraction = fraction,
            _ => out.push(CdfPoint { value: v, fraction }),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionBins {
    /// Width (in tokens) of absolute-position bins.
    pub absolute_width: usize,
    /// Number of bins over relative position `(i + 0.5) / n(x)`.
    pub relative_bins: usize,
}

impl Default for PositionBins {
    fn default() -> Self {
        Self {
            absolute_width: 1,
            relative_bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRatio {
    pub sample_id: String,
    pub superactivators: usize,
    pub in_concept: usize,
    pub ratio: f64,
}

/// SuperActivator counts relative to ground truth, plus where they sit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuperActivatorStats {
    pub concept_id: String,
    pub layer_tag: String,
    pub tau: f64,
    pub per_sample: Vec<SampleRatio>,
    pub ratio_cdf: Vec<CdfPoint>,
    pub absolute_positions: Histogram,
    pub relative_positions: Histogram,
}

/// For every concept-positive sample, `|{i : s_i >= tau}| / |{i : in-concept}|`.
/// SuperActivators may sit outside the ground-truth tokens, so ratios above 1
/// are possible. Position histograms cover all SuperActivator tokens of
/// positive samples.
pub fn superactivator_stats(
    archive: &EmbeddingArchive,
    concept_id: &str,
    v: &[f64],
    tau: f64,
    bins: PositionBins,
) -> Result<SuperActivatorStats> {
    let ci = archive.require_concept(concept_id)?;
    if archive.positive_count(ci) == 0 {
        return Err(Error::NoPositiveSamples(concept_id.to_owned()));
    }
    let scores = score_archive(archive, v)?;
    let max_len = archive.samples().iter().map(Sample::n_tokens).max().unwrap_or(1);
    let width = bins.absolute_width.max(1);
    let n_abs = max_len.div_ceil(width);
    let mut absolute = Histogram::with_edges((0..=n_abs).map(|i| (i * width) as f64).collect());
    let mut relative = Histogram::uniform(0.0, 1.0, bins.relative_bins);
    let mut per_sample = Vec::new();
    for (sample, sc) in archive.samples().iter().zip(&scores) {
        if !sample.sample_label(ci) {
            continue;
        }
        let n = sample.n_tokens();
        let in_concept = sample.token_labels(ci).iter().filter(|&&b| b).count();
        let mut count = 0;
        for (i, &s) in sc.tokens.iter().enumerate() {
            if s >= tau {
                count += 1;
                absolute.add(i as f64);
                relative.add((i as f64 + 0.5) / n as f64);
            }
        }
        // the archive invariant guarantees in_concept > 0 for well-labelled
        // positives; sample-only labels (no token masks) fall back to 0
        let ratio = if in_concept == 0 {
            0.0
        } else {
            count as f64 / in_concept as f64
        };
        per_sample.push(SampleRatio {
            sample_id: sample.sample_id().to_owned(),
            superactivators: count,
            in_concept,
            ratio,
        });
    }
    let ratios: Vec<f64> = per_sample.iter().map(|r| r.ratio).collect();
    Ok(SuperActivatorStats {
        concept_id: concept_id.to_owned(),
        layer_tag: archive.layer_tag().to_owned(),
        tau,
        ratio_cdf: empirical_cdf(&ratios),
        per_sample,
        absolute_positions: absolute,
        relative_positions: relative,
    })
}

/// One row of a per-layer separation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSeparation {
    pub concept_id: String,
    pub layer_tag: String,
    pub n_in: usize,
    pub n_out: usize,
    pub q: f64,
    pub out_quantile: f64,
    pub separation_fraction: f64,
    pub coverage_q98: f64,
    pub coverage_q99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparationReport {
    pub layers: Vec<LayerSeparation>,
    pub in_histograms: Vec<Histogram>,
    pub out_histograms: Vec<Histogram>,
}

/// Separation and coverage per layer for one concept. `layers` pairs each
/// layer's archive with that layer's concept vector.
pub fn separation_report(
    layers: &[(&EmbeddingArchive, &[f64])],
    concept_id: &str,
    q: f64,
    histogram_bins: usize,
) -> Result<SeparationReport> {
    let mut report = SeparationReport {
        layers: Vec::with_capacity(layers.len()),
        in_histograms: Vec::new(),
        out_histograms: Vec::new(),
    };
    for (archive, v) in layers {
        let ci = archive.require_concept(concept_id)?;
        let scores = score_archive(archive, v)?;
        let dist = distributions_from_scores(archive, ci, &scores);
        let (h_in, h_out) = score_histograms(&dist, histogram_bins);
        report.layers.push(LayerSeparation {
            concept_id: concept_id.to_owned(),
            layer_tag: archive.layer_tag().to_owned(),
            n_in: dist.d_in.len(),
            n_out: dist.d_out.len(),
            q,
            out_quantile: empirical_quantile(&dist.d_out, q)?,
            separation_fraction: separation_fraction(&dist, q)?,
            coverage_q98: coverage_from_scores(archive, ci, &scores, 0.98)?,
            coverage_q99: coverage_from_scores(archive, ci, &scores, 0.99)?,
        });
        report.in_histograms.push(h_in);
        report.out_histograms.push(h_out);
    }
    Ok(report)
}
