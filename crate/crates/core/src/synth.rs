// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic archives with planted concept directions.
//!
//! Out-of-concept tokens are isotropic noise `N(0, sigma^2 I)`. An
//! in-concept token adds `alpha * v` for its concept direction `v`:
//!
//! - body tokens: `alpha = sigma * |N(body_shift, body_spread^2)|`
//! - tail tokens: `alpha = kappa * sigma * (1 + |N(0, 1)|)`
//!
//! Every positive sample gets at least one in-concept token, and at least
//! one tail token when the tail fraction is non-zero. An optional
//! per-sample context vector orthogonal to `v` is shared by all in-concept
//! tokens of that sample. CLS is the mean of the sample's tokens. Values are
//! rounded to `f32`, the archive storage precision.
//!
//! Sample structure (labels, coefficients, context) is drawn once per split
//! and shared by every layer; each layer adds its own noise and scales the
//! tail coefficients by its `tail_scale`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::archive::{write_archive, ArchiveHeader, EmbeddingArchive, Modality, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::numeric::{dot, norm, stream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub id: String,
    pub direction_seed: u64,
    /// Fraction of samples that contain the concept.
    pub positive_rate: f64,
    /// Expected fraction of a positive sample's tokens that are in-concept.
    pub in_concept_rate: f64,
    /// Expected fraction of in-concept tokens placed in the tail.
    pub tail_fraction: f64,
    /// Tail offset in units of the noise scale.
    pub tail_shift: f64,
    #[serde(default)]
    pub body_shift: f64,
    #[serde(default)]
    pub body_spread: f64,
    /// Norm of the shared per-sample context, in units of the noise scale.
    #[serde(default)]
    pub local_context: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub tag: String,
    #[serde(default = "one")]
    pub tail_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default = "default_modality")]
    pub modality: Modality,
    pub dim: usize,
    pub n_samples: SplitCounts,
    /// Inclusive token-count range per sample.
    pub tokens_per_sample: [usize; 2],
    #[serde(default = "one")]
    pub noise_sigma: f64,
    pub concepts: Vec<ConceptSpec>,
    #[serde(default = "default_layers")]
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

fn default_model_id() -> String {
    "synthetic".into()
}

fn default_modality() -> Modality {
    Modality::Image
}

fn default_layers() -> Vec<LayerSpec> {
    vec![LayerSpec {
        tag: "100%".into(),
        tail_scale: 1.0,
    }]
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        let [lo, hi] = self.tokens_per_sample;
        if lo == 0 || lo > hi {
            return bad(format!("tokens_per_sample [{lo}, {hi}] must satisfy 1 <= lo <= hi"));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be positive".into());
        }
        if self.layers.is_empty() {
            return bad("at least one layer is required".into());
        }
        let mut tags: Vec<&str> = self.layers.iter().map(|l| l.tag.as_str()).collect();
        tags.sort_unstable();
        if tags.windows(2).any(|w| w[0] == w[1]) {
            return bad("layer tags must be distinct".into());
        }
        if let Some(l) = self
            .layers
            .iter()
            .find(|l| !(l.tail_scale >= 0.0 && l.tail_scale.is_finite()))
        {
            return bad(format!("layer `{}` tail_scale must be non-negative", l.tag));
        }
        let mut ids: Vec<&str> = self.concepts.iter().map(|c| c.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("concept ids must be distinct".into());
        }
        for c in &self.concepts {
            let open = |x: f64| x > 0.0 && x < 1.0;
            if !open(c.positive_rate) || !open(c.in_concept_rate) {
                return bad(format!("concept `{}`: rates must lie in (0, 1)", c.id));
            }
            if !(0.0..=1.0).contains(&c.tail_fraction) {
                return bad(format!("concept `{}`: tail_fraction must lie in [0, 1]", c.id));
            }
            for (name, x) in [
                ("tail_shift", c.tail_shift),
                ("body_spread", c.body_spread),
                ("local_context", c.local_context),
            ] {
                if !(x >= 0.0 && x.is_finite()) {
                    return bad(format!("concept `{}`: {name} must be non-negative", c.id));
                }
            }
            if !c.body_shift.is_finite() {
                return bad(format!("concept `{}`: body_shift must be finite", c.id));
            }
        }
        Ok(())
    }
}

/// Planted ground truth written next to the archives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub seed: u64,
    pub dim: usize,
    pub layers: Vec<String>,
    /// Unit-norm planted direction per concept.
    pub directions: BTreeMap<String, Vec<f64>>,
    /// split -> sample id -> concept -> tail token indices.
    pub tail_tokens: BTreeMap<String, BTreeMap<String, BTreeMap<String, Vec<usize>>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerArchives {
    pub tag: String,
    pub train: EmbeddingArchive,
    pub val: EmbeddingArchive,
    pub test: EmbeddingArchive,
}

impl LayerArchives {
    pub fn split(&self, split: Split) -> &EmbeddingArchive {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub layers: Vec<LayerArchives>,
    pub truth: Truth,
}

impl SyntheticDataset {
    pub fn layer(&self, tag: &str) -> Option<&LayerArchives> {
        self.layers.iter().find(|l| l.tag == tag)
    }

    pub fn direction(&self, concept_id: &str) -> Option<&[f64]> {
        self.truth.directions.get(concept_id).map(Vec::as_slice)
    }
}

/// Unit direction drawn from a concept's own seed.
pub fn planted_direction(direction_seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = stream(direction_seed, &["planted-direction"]);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `floor(x)` plus a Bernoulli draw on the fractional part.
fn stochastic_round(x: f64, rng: &mut StreamRng) -> usize {
    let base = x.floor();
    base as usize + usize::from(rng.gen::<f64>() < x - base)
}

struct Planted {
    /// (token index, body coefficient or tail coefficient before scaling, is tail)
    tokens: Vec<(usize, f64, bool)>,
    context: Option<Vec<f64>>,
}

struct Structure {
    n_tokens: usize,
    concepts: Vec<Option<Planted>>,
}

fn draw_structure(cfg: &SyntheticConfig, split: Split, directions: &[Vec<f64>]) -> Vec<Structure> {
    let n = cfg.n_samples.get(split);
    let mut rng = stream(cfg.seed, &["structure", split.as_str()]);
    let [lo, hi] = cfg.tokens_per_sample;
    let lens: Vec<usize> = (0..n).map(|_| rng.gen_range(lo..=hi)).collect();
    let sigma = cfg.noise_sigma;
    let mut per_concept: Vec<Vec<Option<Planted>>> = Vec::with_capacity(cfg.concepts.len());
    for (c, v) in cfg.concepts.iter().zip(directions) {
        let n_pos = ((c.positive_rate * n as f64).round() as usize).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut positive = vec![false; n];
        order[..n_pos].iter().for_each(|&i| positive[i] = true);
        let body = Normal::new(c.body_shift, c.body_spread).expect("validated spread");
        let planted = (0..n)
            .map(|i| {
                if !positive[i] {
                    return None;
                }
                let len = lens[i];
                let n_in = stochastic_round(c.in_concept_rate * len as f64, &mut rng).clamp(1, len);
                let mut idx = rand::seq::index::sample(&mut rng, len, n_in).into_vec();
                let n_tail = if c.tail_fraction > 0.0 {
                    stochastic_round(c.tail_fraction * n_in as f64, &mut rng).clamp(1, n_in)
                } else {
                    0
                };
                // the first n_tail of a random selection are the tail tokens
                let mut tokens: Vec<(usize, f64, bool)> = idx
                    .drain(..)
                    .enumerate()
                    .map(|(k, t)| {
                        if k < n_tail {
                            let z: f64 = rng.sample(StandardNormal);
                            (t, c.tail_shift * sigma * (1.0 + z.abs()), true)
                        } else {
                            (t, sigma * body.sample(&mut rng).abs(), false)
                        }
                    })
                    .collect();
                tokens.sort_by_key(|t| t.0);
                let context = (c.local_context > 0.0).then(|| loop {
                    let mut u: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
                    let proj = dot(&u, v);
                    u.iter_mut().zip(v).for_each(|(a, b)| *a -= proj * b);
                    let un = norm(&u);
                    if un > 1e-9 {
                        let s = c.local_context * sigma / un;
                        break u.into_iter().map(|x| x * s).collect();
                    }
                    if cfg.dim == 1 {
                        break vec![0.0];
                    }
                });
                Some(Planted { tokens, context })
            })
            .collect();
        per_concept.push(planted);
    }
    (0..n)
        .map(|i| Structure {
            n_tokens: lens[i],
            concepts: per_concept.iter_mut().map(|pc| pc[i].take()).collect(),
        })
        .collect()
}

fn sample_id(split: Split, i: usize) -> String {
    format!("{}-{i:05}", split.as_str())
}

fn render_layer(
    cfg: &SyntheticConfig,
    split: Split,
    layer: &LayerSpec,
    structure: &[Structure],
    directions: &[Vec<f64>],
) -> Result<EmbeddingArchive> {
    let mut rng = stream(cfg.seed, &["noise", split.as_str(), &layer.tag]);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let dim = cfg.dim;
    let records = structure
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut tokens: Vec<Vec<f64>> = (0..s.n_tokens)
                .map(|_| (0..dim).map(|_| noise.sample(&mut rng)).collect())
                .collect();
            let mut labels: Vec<(String, Vec<bool>)> = Vec::with_capacity(cfg.concepts.len());
            for ((c, v), planted) in cfg.concepts.iter().zip(directions).zip(&s.concepts) {
                let mut lab = vec![false; s.n_tokens];
                if let Some(p) = planted {
                    for &(t, alpha, tail) in &p.tokens {
                        let a = if tail { alpha * layer.tail_scale } else { alpha };
                        tokens[t].iter_mut().zip(v).for_each(|(x, d)| *x += a * d);
                        if let Some(u) = &p.context {
                            tokens[t].iter_mut().zip(u).for_each(|(x, d)| *x += d);
                        }
                        lab[t] = true;
                    }
                }
                labels.push((c.id.clone(), lab));
            }
            // archives store f32; quantise here so memory and disk agree
            let f32_round = |x: &mut f64| *x = f64::from(*x as f32);
            tokens.iter_mut().flatten().for_each(f32_round);
            let mut cls = crate::numeric::mean_rows(tokens.iter().map(Vec::as_slice), dim).expect("non-empty sample");
            cls.iter_mut().for_each(f32_round);
            let mut rec = SampleRecord::new(sample_id(split, i), tokens, cls);
            for (id, lab) in labels {
                rec = rec.with_concept(id, lab);
            }
            rec
        })
        .collect();
    let header = ArchiveHeader {
        model_id: cfg.model_id.clone(),
        modality: cfg.modality,
        layer_tag: layer.tag.clone(),
        dim,
        split,
    };
    EmbeddingArchive::new(header, cfg.concepts.iter().map(|c| c.id.clone()).collect(), records)
}

/// Builds train/val/test archives for every configured layer.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let directions: Vec<Vec<f64>> = cfg
        .concepts
        .iter()
        .map(|c| planted_direction(c.direction_seed, cfg.dim))
        .collect();
    let splits = [Split::Train, Split::Val, Split::Test];
    let structures: Vec<Vec<Structure>> = splits.iter().map(|&s| draw_structure(cfg, s, &directions)).collect();

    let mut tail_tokens = BTreeMap::new();
    for (split, st) in splits.iter().zip(&structures) {
        let mut per_sample = BTreeMap::new();
        for (i, s) in st.iter().enumerate() {
            let mut per_concept = BTreeMap::new();
            for (c, p) in cfg.concepts.iter().zip(&s.concepts) {
                if let Some(p) = p {
                    let tails: Vec<usize> = p.tokens.iter().filter(|t| t.2).map(|t| t.0).collect();
                    if !tails.is_empty() {
                        per_concept.insert(c.id.clone(), tails);
                    }
                }
            }
            if !per_concept.is_empty() {
                per_sample.insert(sample_id(*split, i), per_concept);
            }
        }
        tail_tokens.insert(split.as_str().to_owned(), per_sample);
    }

    let layers = cfg
        .layers
        .iter()
        .map(|l| {
            let mut out = splits
                .iter()
                .zip(&structures)
                .map(|(&s, st)| render_layer(cfg, s, l, st, &directions))
                .collect::<Result<Vec<_>>>()?
                .into_iter();
            Ok(LayerArchives {
                tag: l.tag.clone(),
                train: out.next().expect("train"),
                val: out.next().expect("val"),
                test: out.next().expect("test"),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticDataset {
        layers,
        truth: Truth {
            seed: cfg.seed,
            dim: cfg.dim,
            layers: cfg.layers.iter().map(|l| l.tag.clone()).collect(),
            directions: cfg.concepts.iter().map(|c| c.id.clone()).zip(directions).collect(),
            tail_tokens,
        },
    })
}

/// Directory name for a layer tag: characters other than ASCII
/// alphanumerics, `-`, `_` and `.` are dropped.
pub fn layer_dir_name(tag: &str) -> String {
    let clean: String = tag
        .chars()
        .filter(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        .collect();
    format!("layer-{clean}")
}

/// Writes `<out>/layer-<tag>/<split>/` archives and `<out>/truth.json`.
/// Returns the archive directories in layer-major, split-minor order.
pub fn write_dataset(ds: &SyntheticDataset, out: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for l in &ds.layers {
        let name = layer_dir_name(&l.tag);
        if !seen.insert(name.clone()) {
            return Err(Error::Config(format!("layer tags map to the same directory `{name}`")));
        }
        for split in [Split::Train, Split::Val, Split::Test] {
            let dir = out.join(&name).join(split.as_str());
            write_archive(l.split(split), &dir)?;
            dirs.push(dir);
        }
    }
    let mut json = serde_json::to_vec_pretty(&ds.truth)?;
    json.push(b'\n');
    let tpath = out.join("truth.json");
    fs::write(&tpath, json).map_err(|e| Error::io(&tpath, e))?;
    Ok(dirs)
}
