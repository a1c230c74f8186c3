// SPDX-License-Identifier: MIT OR Apache-2.0

//! Lloyd's k-means with k-means++ seeding.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ConceptVector, Method, Space};
use crate::error::{Error, Result};
use crate::numeric::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl KMeansConfig {
    /// Default cluster count for the given embedding space.
    pub fn for_space(space: Space, seed: u64) -> Self {
        Self {
            k: match space {
                Space::Token => 1000,
                Space::Cls => 50,
            },
            max_iter: 300,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    /// True when the last pass changed no assignment.
    pub converged: bool,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest index on ties.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = d2.iter().rposition(|&d| d > 0.0).expect("positive mass");
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > r && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // every point coincides with a centroid already
            rng.gen_range(0..points.len())
        };
        let c = points[pick].to_vec();
        d2.iter_mut().zip(points).for_each(|(d, p)| *d = d.min(sq_dist(p, &c)));
        centroids.push(c);
    }
    centroids
}

/// Clusters `points` into `cfg.k` groups under squared Euclidean distance.
///
/// An empty cluster is moved onto the point farthest from its current
/// centroid. Iteration stops when no assignment changes or after
/// `cfg.max_iter` passes.
pub fn kmeans(points: &[&[f64]], cfg: &KMeansConfig) -> Result<KMeansFit> {
    if cfg.k == 0 || cfg.max_iter == 0 {
        return Err(Error::Config("k-means needs k >= 1 and max_iter >= 1".into()));
    }
    if cfg.k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {} exceeds the {} points",
            cfg.k,
            points.len()
        )));
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: p.len(),
        });
    }

    let mut rng = stream(cfg.seed, &["kmeans++"]);
    let mut centroids = plus_plus_init(points, cfg.k, &mut rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        iterations += 1;
        let nearest_all: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        let changed = nearest_all.iter().zip(&assignments).any(|((j, _), a)| j != a);
        let inertia: f64 = nearest_all.iter().map(|(_, d)| d).sum();
        if let Some(&prev) = history.last() {
            debug_assert!(
                inertia <= prev * (1.0 + 1e-9) + 1e-12,
                "inertia rose from {prev} to {inertia} at iteration {iterations}"
            );
        }
        history.push(inertia);
        assignments.iter_mut().zip(&nearest_all).for_each(|(a, (j, _))| *a = *j);
        if !changed {
            converged = true;
            break;
        }

        // update step
        let mut sums = vec![vec![0.0; dim]; cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
        }
        for j in 0..cfg.k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                centroids[j] = sums[j].iter().map(|s| s * inv).collect();
            }
        }
        if counts.contains(&0) {
            let mut far: Vec<f64> = points
                .iter()
                .zip(&assignments)
                .map(|(p, &a)| sq_dist(p, &centroids[a]))
                .collect();
            for j in (0..cfg.k).filter(|&j| counts[j] == 0) {
                let mut i_best = 0;
                for i in 1..far.len() {
                    if far[i] > far[i_best] {
                        i_best = i;
                    }
                }
                centroids[j] = points[i_best].to_vec();
                far[i_best] = 0.0;
            }
        }
    }

    let mut sizes = vec![0usize; cfg.k];
    assignments.iter().for_each(|&a| sizes[a] += 1);
    Ok(KMeansFit {
        centroids,
        assignments,
        sizes,
        inertia_history: history,
        iterations,
        converged,
    })
}

/// Runs k-means and wraps each centroid as a candidate concept vector.
/// Candidates are named by their cluster index.
pub fn kmeans_concepts(
    points: &[&[f64]],
    cfg: &KMeansConfig,
    layer_tag: &str,
    space: Space,
) -> Result<(Vec<ConceptVector>, KMeansFit)> {
    let fit = kmeans(points, cfg)?;
    let vectors = fit
        .centroids
        .iter()
        .enumerate()
        .map(|(j, c)| {
            ConceptVector::new(j.to_string(), layer_tag, Method::Kmeans, space, c.clone())
                .with_meta("cluster_size", fit.sizes[j])
                .with_meta("iterations", fit.iterations)
                .with_meta("converged", fit.converged)
        })
        .collect();
    Ok((vectors, fit))
}
