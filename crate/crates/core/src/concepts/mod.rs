// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept vectors: extraction from a labelled train archive, clustering
//! for unsupervised candidates, exchange files, and candidate matching.

mod exchange;
mod kmeans;
mod matching;
mod probe;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::archive::EmbeddingArchive;
use crate::error::{Error, Result};
use crate::numeric::{mean_rows, norm};

pub use exchange::{
    import_external_vectors, read_concepts, write_concepts, ConceptEntry, ConceptManifest, MANIFEST_FILE, VECTORS_FILE,
};
pub use kmeans::{kmeans, kmeans_concepts, KMeansConfig, KMeansFit};
pub use matching::match_unsupervised_to_concept;
pub use probe::{cluster_separators, train_linear_separator, ProbeConfig, ProbeFit};

/// Norm below which a concept vector is flagged as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MeanPrototype,
    Linsep,
    Kmeans,
    KLinsep,
    External,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::MeanPrototype => "mean_prototype",
            Method::Linsep => "linsep",
            Method::Kmeans => "kmeans",
            Method::KLinsep => "k_linsep",
            Method::External => "external",
        }
    }

    /// Whether the method yields unlabelled candidates that need matching.
    pub fn is_unsupervised(self) -> bool {
        matches!(self, Method::Kmeans | Method::KLinsep | Method::External)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    /// Accepts the CLI short form `avg` for the mean prototype.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "avg" | "mean_prototype" => Method::MeanPrototype,
            "linsep" => Method::Linsep,
            "kmeans" => Method::Kmeans,
            "k_linsep" => Method::KLinsep,
            "external" => Method::External,
            _ => return Err(Error::InvalidArgument(format!("unknown concept method `{s}`"))),
        })
    }
}

/// Which embedding a concept vector was fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Token,
    Cls,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::Token => "token",
            Space::Cls => "cls",
        }
    }
}

impl std::str::FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Space::Token),
            "cls" => Ok(Space::Cls),
            _ => Err(Error::InvalidArgument(format!("unknown embedding space `{s}`"))),
        }
    }
}

/// A direction in embedding space plus where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    /// Ground-truth concept id, or the candidate index for unsupervised output.
    pub concept_id: String,
    pub layer_tag: String,
    pub method: Method,
    pub space: Space,
    pub values: Vec<f64>,
    #[serde(default)]
    pub train_meta: BTreeMap<String, serde_json::Value>,
}

impl ConceptVector {
    pub fn new(
        concept_id: impl Into<String>,
        layer_tag: impl Into<String>,
        method: Method,
        space: Space,
        values: Vec<f64>,
    ) -> Self {
        let mut v = Self {
            concept_id: concept_id.into(),
            layer_tag: layer_tag.into(),
            method,
            space,
            values,
            train_meta: BTreeMap::new(),
        };
        if v.is_degenerate() {
            log::warn!("concept vector `{}` has near-zero norm", v.concept_id);
            v.train_meta.insert("degenerate".into(), true.into());
        }
        v
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_degenerate(&self) -> bool {
        norm(&self.values) < DEGENERATE_NORM
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.train_meta.insert(key.to_owned(), value.into());
        self
    }

    /// Unit-norm copy. Degenerate vectors are returned unchanged.
    pub fn normalized(&self) -> ConceptVector {
        let n = norm(&self.values);
        let mut out = self.clone();
        if n >= DEGENERATE_NORM {
            out.values.iter_mut().for_each(|x| *x /= n);
        }
        out
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: self.dim(),
            });
        }
        Ok(())
    }
}

/// Arithmetic mean of the positive examples.
pub fn mean_prototype(positives: &[&[f64]]) -> Result<Vec<f64>> {
    let dim = positives
        .first()
        .map(|p| p.len())
        .ok_or_else(|| Error::Empty("mean prototype over zero positive examples".into()))?;
    if let Some(p) = positives.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: p.len(),
        });
    }
    Ok(mean_rows(positives.iter().copied(), dim).expect("non-empty"))
}

/// Positive and negative training vectors, in that order.
pub type PosNeg<'a> = (Vec<&'a [f64]>, Vec<&'a [f64]>);

/// Positive and negative training vectors for a concept.
///
/// In token space positives are the in-concept tokens and negatives are all
/// tokens of concept-negative samples; unlabelled tokens of positive samples
/// are left out, as in the activation distributions. In CLS space the CLS
/// vectors of positive and negative samples are used.
pub fn training_sets<'a>(archive: &'a EmbeddingArchive, concept_id: &str, space: Space) -> Result<PosNeg<'a>> {
    let ci = archive.require_concept(concept_id)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for s in archive.samples() {
        match (space, s.sample_label(ci)) {
            (Space::Cls, true) => pos.push(s.cls()),
            (Space::Cls, false) => neg.push(s.cls()),
            (Space::Token, true) => pos.extend(s.tokens().zip(s.token_labels(ci)).filter(|(_, &l)| l).map(|(t, _)| t)),
            (Space::Token, false) => neg.extend(s.tokens()),
        }
    }
    Ok((pos, neg))
}

/// Every vector of the given space, in archive order.
pub fn all_vectors(archive: &EmbeddingArchive, space: Space) -> Vec<&[f64]> {
    match space {
        Space::Token => archive.samples().iter().flat_map(|s| s.tokens()).collect(),
        Space::Cls => archive.samples().iter().map(|s| s.cls()).collect(),
    }
}

/// Supervised extraction for one concept from a train archive.
pub fn supervised_concept(
    archive: &EmbeddingArchive,
    concept_id: &str,
    method: Method,
    space: Space,
    probe: &ProbeConfig,
) -> Result<ConceptVector> {
    let (pos, neg) = training_sets(archive, concept_id, space)?;
    if pos.is_empty() {
        return Err(Error::NoPositiveSamples(concept_id.to_owned()));
    }
    let layer = archive.layer_tag();
    match method {
        Method::MeanPrototype => {
            let n = pos.len();
            Ok(ConceptVector::new(concept_id, layer, method, space, mean_prototype(&pos)?).with_meta("n_positive", n))
        }
        Method::Linsep => {
            let cfg = ProbeConfig {
                seed: crate::numeric::derive_seed(probe.seed, &["linsep", concept_id]),
                ..probe.clone()
            };
            let fit = train_linear_separator(&pos, &neg, &cfg)?;
            let mut v = ConceptVector::new(concept_id, layer, method, space, fit.weights.clone());
            v.train_meta.extend(fit.meta());
            Ok(v)
        }
        other => Err(Error::InvalidArgument(format!("`{other}` is not a supervised method"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::tests::header;
    use crate::archive::{SampleRecord, Split};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn prototype_examples() {
        assert_eq!(mean_prototype(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(mean_prototype(&[&[2.0, 2.0]]).unwrap(), vec![2.0, 2.0]);
        assert!(matches!(mean_prototype(&[]), Err(Error::Empty(_))));
        assert!(mean_prototype(&[&[1.0], &[1.0, 2.0]]).is_err());
    }

    #[test]
    fn prototype_matches_accumulate_then_divide() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..6).map(|_| rng.gen_range(-10.0..10.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let got = mean_prototype(&refs).unwrap();
        for j in 0..6 {
            let mut sum = 0.0;
            for r in &rows {
                sum += r[j];
            }
            assert!((got[j] - sum / 50.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_vectors_are_flagged() {
        let v = ConceptVector::new("c", "L", Method::External, Space::Token, vec![0.0; 3]);
        assert!(v.is_degenerate());
        assert_eq!(v.train_meta["degenerate"], true);
        let w = ConceptVector::new("c", "L", Method::External, Space::Token, vec![3.0, 4.0]);
        assert!(!w.train_meta.contains_key("degenerate"));
        assert_eq!(w.normalized().values, vec![0.6, 0.8]);
        assert!(w.check_dim(3).is_err());
    }

    #[test]
    fn method_names() {
        assert_eq!("avg".parse::<Method>().unwrap(), Method::MeanPrototype);
        for m in [
            Method::MeanPrototype,
            Method::Linsep,
            Method::Kmeans,
            Method::KLinsep,
            Method::External,
        ] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
        assert!("sae".parse::<Method>().is_err());
    }

    #[test]
    fn training_sets_follow_exclusion_rule() {
        let recs = vec![
            SampleRecord::new("p", vec![vec![1.0], vec![2.0]], vec![9.0]).with_concept("c", vec![true, false]),
            SampleRecord::new("n", vec![vec![3.0], vec![4.0]], vec![8.0]).with_concept("c", vec![false, false]),
        ];
        let a = EmbeddingArchive::new(header(1, Split::Train), vec!["c".into()], recs).unwrap();
        let (p, n) = training_sets(&a, "c", Space::Token).unwrap();
        assert_eq!(p, vec![&[1.0][..]]);
        assert_eq!(n, vec![&[3.0][..], &[4.0][..]]);
        let (p, n) = training_sets(&a, "c", Space::Cls).unwrap();
        assert_eq!((p, n), (vec![&[9.0][..]], vec![&[8.0][..]]));
        let v = supervised_concept(&a, "c", Method::MeanPrototype, Space::Token, &ProbeConfig::default()).unwrap();
        assert_eq!(v.values, vec![1.0]);
        assert!(supervised_concept(&a, "c", Method::Kmeans, Space::Token, &ProbeConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn prototype_permutation_invariant_and_translation_equivariant(
            rows in prop::collection::vec(prop::collection::vec(-50f64..50.0, 3), 1..30),
            shift in prop::collection::vec(-20f64..20.0, 3),
            rot in 0usize..30,
        ) {
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let base = mean_prototype(&refs).unwrap();
            let mut rotated = refs.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            rotated.reverse();
            let perm = mean_prototype(&rotated).unwrap();
            let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
            let srefs: Vec<&[f64]> = shifted.iter().map(Vec::as_slice).collect();
            let moved = mean_prototype(&srefs).unwrap();
            for j in 0..3 {
                prop_assert!((base[j] - perm[j]).abs() < 1e-9);
                prop_assert!((moved[j] - base[j] - shift[j]).abs() < 1e-9);
            }
        }
    }
}
