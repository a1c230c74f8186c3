// SPDX-License-Identifier: MIT OR Apache-2.0

//! Perturbation attribution: LIME, KernelSHAP, RISE and direct alignment.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Game;
use crate::error::{Error, Result};
use crate::numeric::StreamRng;

/// Evaluation budget shared by the sampling methods.
pub const DEFAULT_BUDGET: usize = 2000;

/// Ridge added to singular normal equations.
const RIDGE: f64 = 1e-6;

/// Largest token count for which coalitions are ever enumerated.
const MAX_ENUMERATION_BITS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LimeConfig {
    /// Defaults to `min(2^n, 2000)`.
    pub n_perturb: Option<usize>,
    /// Defaults to `0.25 * n`.
    pub kernel_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapConfig {
    pub n_perturb: usize,
}

impl Default for ShapConfig {
    fn default() -> Self {
        Self {
            n_perturb: DEFAULT_BUDGET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiseConfig {
    pub n_masks: usize,
    pub keep_prob: f64,
}

impl Default for RiseConfig {
    fn default() -> Self {
        Self {
            n_masks: DEFAULT_BUDGET,
            keep_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimeFit {
    pub scores: Vec<f64>,
    pub intercept: f64,
    /// Whether every coalition was evaluated.
    pub enumerated: bool,
    /// Whether the normal equations needed the ridge fallback.
    pub ridge_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapFit {
    pub scores: Vec<f64>,
    pub enumerated: bool,
    pub ridge_fallback: bool,
}

fn mask_from_bits(bits: u64, n: usize) -> Vec<bool> {
    (0..n).map(|i| bits >> i & 1 == 1).collect()
}

/// Solves `A x = b` for symmetric positive semi-definite `A`, falling back
/// to a small ridge when Cholesky fails or the factor is ill-conditioned.
fn solve_normal(a: DMatrix<f64>, b: DVector<f64>) -> (DVector<f64>, bool) {
    let well_conditioned = |l: &DMatrix<f64>| {
        let d = l.diagonal();
        let (lo, hi) = d
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), x| (lo.min(x.abs()), hi.max(x.abs())));
        hi > 0.0 && lo / hi > 1e-7
    };
    if let Some(ch) = a.clone().cholesky() {
        if well_conditioned(&ch.l()) {
            return (ch.solve(&b), false);
        }
    }
    let n = a.nrows();
    let scale = a.diagonal().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let reg = a + DMatrix::identity(n, n) * (RIDGE * scale);
    let x = match reg.clone().cholesky() {
        Some(ch) => ch.solve(&b),
        None => reg.svd(true, true).solve(&b, 1e-12).unwrap_or_else(|_| DVector::zeros(n)),
    };
    (x, true)
}

/// Weighted least-squares surrogate `f(mask) ~ b0 + sum_i b_i mask_i` with
/// proximity kernel `exp(-d^2 / width^2)`, `d` the number of removed tokens.
///
/// With `2^n <= n_perturb` every coalition is evaluated once. Otherwise the
/// full mask is evaluated first and each further mask removes a uniform
/// number of tokens, chosen uniformly.
pub fn lime_attribution(game: &dyn Game, cfg: &LimeConfig, rng: &mut StreamRng) -> Result<LimeFit> {
    let n = game.n();
    if n == 0 {
        return Err(Error::Empty("LIME over zero tokens".into()));
    }
    let budget = cfg.n_perturb.unwrap_or_else(|| (1usize << n.min(11)).min(DEFAULT_BUDGET));
    if budget == 0 {
        return Err(Error::InvalidArgument("LIME needs at least one perturbation".into()));
    }
    let width = cfg.kernel_width.unwrap_or(0.25 * n as f64);
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::InvalidArgument(format!("LIME kernel width {width} must be positive")));
    }
    let enumerated = n <= MAX_ENUMERATION_BITS && (1usize << n) <= budget;
    let masks: Vec<Vec<bool>> = if enumerated {
        (0..1u64 << n).map(|b| mask_from_bits(b, n)).collect()
    } else {
        let mut out = vec![vec![true; n]];
        while out.len() < budget {
            let remove = rng.gen_range(1..=n);
            let mut m = vec![true; n];
            sample_indices(rng, n, remove).into_iter().for_each(|i| m[i] = false);
            out.push(m);
        }
        out
    };

    let p = n + 1;
    let mut ata = DMatrix::<f64>::zeros(p, p);
    let mut atb = DVector::<f64>::zeros(p);
    let mut x = vec![0.0; p];
    for m in &masks {
        let y = game.value(m);
        let removed = m.iter().filter(|&&b| !b).count() as f64;
        let w = (-(removed * removed) / (width * width)).exp();
        x[0] = 1.0;
        m.iter().enumerate().for_each(|(i, &b)| x[i + 1] = if b { 1.0 } else { 0.0 });
        for r in 0..p {
            if x[r] == 0.0 {
                continue;
            }
            atb[r] += w * x[r] * y;
            for c in 0..p {
                ata[(r, c)] += w * x[r] * x[c];
            }
        }
    }
    let (beta, ridge_fallback) = solve_normal(ata, atb);
    if ridge_fallback {
        log::debug!("LIME normal equations were singular; ridge fallback applied");
    }
    Ok(LimeFit {
        intercept: beta[0],
        scores: beta.iter().skip(1).copied().collect(),
        enumerated,
        ridge_fallback,
    })
}

fn choose(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |r, i| r * (n - i) as f64 / (i + 1) as f64)
}

/// KernelSHAP: Shapley-kernel weighted regression over coalitions, with the
/// efficiency constraint `sum(phi) = f(full) - f(empty)` imposed exactly by
/// eliminating the last coefficient.
///
/// All `2^n - 2` proper coalitions are used when they fit in the budget, in
/// which case the result equals the exact Shapley values. Otherwise the
/// coalition size is drawn with probability proportional to
/// `(n - 1) / (k (n - k))` and members uniformly, each with unit weight.
pub fn kernel_shap_attribution(game: &dyn Game, cfg: &ShapConfig, rng: &mut StreamRng) -> Result<ShapFit> {
    let n = game.n();
    if n == 0 {
        return Err(Error::Empty("KernelSHAP over zero tokens".into()));
    }
    let f_empty = game.value(&vec![false; n]);
    let f_full = game.value(&vec![true; n]);
    let total = f_full - f_empty;
    if n == 1 {
        return Ok(ShapFit {
            scores: vec![total],
            enumerated: true,
            ridge_fallback: false,
        });
    }
    if cfg.n_perturb == 0 {
        return Err(Error::InvalidArgument("KernelSHAP needs at least one coalition".into()));
    }
    let enumerated = n <= MAX_ENUMERATION_BITS && (1usize << n) - 2 <= cfg.n_perturb;
    let mut coalitions: Vec<(Vec<bool>, f64)> = Vec::new();
    if enumerated {
        for b in 1..(1u64 << n) - 1 {
            let m = mask_from_bits(b, n);
            let k = b.count_ones() as usize;
            let w = (n - 1) as f64 / ((k * (n - k)) as f64 * choose(n, k));
            coalitions.push((m, w));
        }
    } else {
        let size_w: Vec<f64> = (1..n).map(|k| (n - 1) as f64 / (k * (n - k)) as f64).collect();
        let dist = rand::distributions::WeightedIndex::new(&size_w).expect("positive weights");
        for _ in 0..cfg.n_perturb {
            let k = rng.sample(&dist) + 1;
            let mut m = vec![false; n];
            sample_indices(rng, n, k).into_iter().for_each(|i| m[i] = true);
            coalitions.push((m, 1.0));
        }
    }

    // y - f0 - z_last * total = sum_{i<last} phi_i (z_i - z_last)
    let p = n - 1;
    let mut ata = DMatrix::<f64>::zeros(p, p);
    let mut atb = DVector::<f64>::zeros(p);
    let mut x = vec![0.0; p];
    for (m, w) in &coalitions {
        let zl = if m[n - 1] { 1.0 } else { 0.0 };
        let y = game.value(m) - f_empty - zl * total;
        for i in 0..p {
            x[i] = if m[i] { 1.0 } else { 0.0 } - zl;
        }
        for r in 0..p {
            if x[r] == 0.0 {
                continue;
            }
            atb[r] += w * x[r] * y;
            for c in 0..p {
                ata[(r, c)] += w * x[r] * x[c];
            }
        }
    }
    let (phi, ridge_fallback) = solve_normal(ata, atb);
    let mut scores: Vec<f64> = phi.iter().copied().collect();
    scores.push(total - scores.iter().sum::<f64>());
    Ok(ShapFit {
        scores,
        enumerated,
        ridge_fallback,
    })
}

/// RISE: `score_i = E[f(M) * M_i] / keep_prob` over Bernoulli masks.
pub fn rise_attribution(game: &dyn Game, cfg: &RiseConfig, rng: &mut StreamRng) -> Result<Vec<f64>> {
    let n = game.n();
    if n == 0 {
        return Err(Error::Empty("RISE over zero tokens".into()));
    }
    if cfg.n_masks == 0 || !(cfg.keep_prob > 0.0 && cfg.keep_prob <= 1.0) {
        return Err(Error::InvalidArgument(
            "RISE needs n_masks >= 1 and keep_prob in (0, 1]".into(),
        ));
    }
    let mut acc = vec![0.0; n];
    let mut m = vec![false; n];
    for _ in 0..cfg.n_masks {
        m.iter_mut().for_each(|b| *b = rng.gen::<f64>() < cfg.keep_prob);
        let y = game.value(&m);
        acc.iter_mut().zip(&m).filter(|(_, &b)| b).for_each(|(a, _)| *a += y);
    }
    let scale = 1.0 / (cfg.n_masks as f64 * cfg.keep_prob);
    Ok(acc.into_iter().map(|a| a * scale).collect())
}

/// Objective of each token kept alone.
pub fn direct_alignment(game: &dyn Game) -> Vec<f64> {
    let n = game.n();
    let mut m = vec![false; n];
    (0..n)
        .map(|i| {
            m[i] = true;
            let v = game.value(&m);
            m[i] = false;
            v
        })
        .collect()
}
