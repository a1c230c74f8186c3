// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bias-free logistic probes trained with mini-batch SGD and momentum.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ConceptVector, Method, Space};
use crate::error::{Error, Result};
use crate::numeric::{derive_seed, dot, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub early_stop_patience: usize,
    /// Relative loss improvement needed to reset the patience counter.
    pub early_stop_min_rel_improvement: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            max_epochs: 100,
            batch_size: 32,
            weight_decay: 1e-4,
            lr_decay_factor: 0.5,
            lr_decay_every: 10,
            early_stop_patience: 15,
            early_stop_min_rel_improvement: 1e-3,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.lr_decay_factor, self.early_stop_min_rel_improvement];
        if positive.iter().any(|x| !(*x > 0.0 && x.is_finite()))
            || self.max_epochs == 0
            || self.batch_size == 0
            || self.lr_decay_every == 0
            || self.early_stop_patience == 0
        {
            return Err(Error::Config("probe rates and epoch counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..=f64::INFINITY).contains(&self.weight_decay) {
            return Err(Error::Config(
                "probe momentum must be in [0, 1) and weight decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    pub weights: Vec<f64>,
    pub epochs_run: usize,
    pub final_loss: f64,
    /// Accuracy of `<w, x> > 0` on the balanced training set.
    pub train_accuracy: f64,
    pub n_positive: usize,
    pub n_negative: usize,
    pub loss_history: Vec<f64>,
}

impl ProbeFit {
    pub fn separable(&self) -> bool {
        self.train_accuracy == 1.0
    }

    pub fn meta(&self) -> BTreeMap<String, serde_json::Value> {
        let mut m = BTreeMap::new();
        m.insert("epochs_run".into(), self.epochs_run.into());
        m.insert("final_loss".into(), self.final_loss.into());
        m.insert("train_accuracy".into(), self.train_accuracy.into());
        m.insert("separable".into(), self.separable().into());
        m.insert("n_positive".into(), self.n_positive.into());
        m.insert("n_negative".into(), self.n_negative.into());
        m.insert("early_stop".into(), "min_relative_improvement".into());
        m
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean_loss(w: &[f64], data: &[(&[f64], bool)]) -> f64 {
    data.iter()
        .map(|(x, y)| {
            let m = dot(w, x);
            if *y {
                softplus(-m)
            } else {
                softplus(m)
            }
        })
        .sum::<f64>()
        / data.len() as f64
}

/// Trains `w` to minimise binary cross-entropy on logits `<w, x>`.
///
/// The majority class is subsampled to the minority size with a seeded
/// draw. Weights start at zero. The learning rate is multiplied by
/// `lr_decay_factor` every `lr_decay_every` epochs, and training stops once
/// the epoch loss has not improved by the relative margin for `patience`
/// epochs in a row.
pub fn train_linear_separator(pos: &[&[f64]], neg: &[&[f64]], cfg: &ProbeConfig) -> Result<ProbeFit> {
    cfg.validate()?;
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Empty(format!(
            "probe needs both classes (got {} positive, {} negative)",
            pos.len(),
            neg.len()
        )));
    }
    let dim = pos[0].len();
    if let Some(x) = pos.iter().chain(neg).find(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: x.len(),
        });
    }

    let mut rng = stream(cfg.seed, &["probe"]);
    let keep = pos.len().min(neg.len());
    let subsample = |xs: &[&'_ [f64]], rng: &mut crate::numeric::StreamRng| -> Vec<usize> {
        if xs.len() == keep {
            return (0..keep).collect();
        }
        let mut idx = rand::seq::index::sample(rng, xs.len(), keep).into_vec();
        idx.sort_unstable();
        idx
    };
    let pi = subsample(pos, &mut rng);
    let ni = subsample(neg, &mut rng);
    let mut data: Vec<(&[f64], bool)> = pi
        .iter()
        .map(|&i| (pos[i], true))
        .chain(ni.iter().map(|&i| (neg[i], false)))
        .collect();

    let mut w = vec![0.0; dim];
    let mut vel = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut best = mean_loss(&w, &data);
    let mut stale = 0usize;
    let mut history = Vec::new();
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.learning_rate * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().zip(&w).for_each(|(g, wi)| *g = cfg.weight_decay * wi);
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let (x, y) = data[i];
                let r = (sigmoid(dot(&w, x)) - if y { 1.0 } else { 0.0 }) * inv;
                grad.iter_mut().zip(x).for_each(|(g, xi)| *g += r * xi);
            }
            for ((wi, vi), gi) in w.iter_mut().zip(vel.iter_mut()).zip(&grad) {
                *vi = cfg.momentum * *vi + gi;
                *wi -= lr * *vi;
            }
        }
        epochs_run = epoch + 1;
        let loss = mean_loss(&w, &data);
        if !loss.is_finite() || w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged { epoch: epochs_run, loss });
        }
        history.push(loss);
        if loss < best * (1.0 - cfg.early_stop_min_rel_improvement) {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }

    // stable order for the accuracy pass
    data.sort_by_key(|(_, y)| !*y);
    let correct = data.iter().filter(|(x, y)| (dot(&w, x) > 0.0) == *y).count();
    Ok(ProbeFit {
        train_accuracy: correct as f64 / data.len() as f64,
        final_loss: *history.last().expect("at least one epoch"),
        weights: w,
        epochs_run,
        n_positive: keep,
        n_negative: keep,
        loss_history: history,
    })
}

/// One-vs-rest probe per cluster. `assignments[i]` is the cluster of
/// `points[i]`; cluster ids must be dense in `0..k` with `k >= 2`.
pub fn cluster_separators(
    points: &[&[f64]],
    assignments: &[usize],
    cfg: &ProbeConfig,
    layer_tag: &str,
    space: Space,
) -> Result<Vec<ConceptVector>> {
    if points.len() != assignments.len() {
        return Err(Error::InvalidArgument(format!(
            "{} points but {} cluster assignments",
            points.len(),
            assignments.len()
        )));
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(Error::InvalidArgument("cluster separators need at least 2 clusters".into()));
    }
    let mut sizes = vec![0usize; k];
    assignments.iter().for_each(|&a| sizes[a] += 1);
    if let Some(j) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Empty(format!("cluster {j} has no points")));
    }
    (0..k)
        .into_par_iter()
        .map(|j| {
            let (mut inside, mut outside) = (Vec::new(), Vec::new());
            for (&p, &a) in points.iter().zip(assignments) {
                if a == j {
                    inside.push(p);
                } else {
                    outside.push(p);
                }
            }
            let c = ProbeConfig {
                seed: derive_seed(cfg.seed, &["cluster-separator", &j.to_string()]),
                ..cfg.clone()
            };
            let fit = train_linear_separator(&inside, &outside, &c)?;
            let mut v = ConceptVector::new(j.to_string(), layer_tag, Method::KLinsep, space, fit.weights.clone())
                .with_meta("cluster_size", sizes[j]);
            v.train_meta.extend(fit.meta());
            Ok(v)
        })
        .collect()
}
