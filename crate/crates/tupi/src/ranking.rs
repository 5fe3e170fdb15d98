//! Pairwise rank supervision: ordered pairs, the soft hinge rank loss, the
//! strict pairwise accuracy metric, and a small linear ranker used to
//! manufacture initial predictors for experiments.

use std::collections::HashSet;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TupiError};
use crate::types::{FeatureSet, Predictions};

/// Ordered index pairs (q, r), each asserting rank(q) > rank(r).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankPairs {
    pairs: Vec<(usize, usize)>,
}

impl RankPairs {
    /// Validates indices against the instance count n, rejects q = r and
    /// exact duplicates.
    pub fn new(pairs: Vec<(usize, usize)>, n: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for &(q, r) in &pairs {
            if q >= n || r >= n {
                return Err(TupiError::invalid(format!(
                    "pair ({q},{r}) out of range for n = {n}"
                )));
            }
            if q == r {
                return Err(TupiError::invalid(format!("pair ({q},{q}) is reflexive")));
            }
            if !seen.insert((q, r)) {
                return Err(TupiError::invalid(format!("duplicate pair ({q},{r})")));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Fraction of pairs ranked correctly, f[q] > f[r] strictly; ties count as
/// incorrect.
pub fn rank_accuracy(f: &Predictions, pairs: &RankPairs) -> Result<f64> {
    if pairs.is_empty() {
        return Err(TupiError::invalid("cannot score an empty pair set"));
    }
    let scores = f.scores();
    let mut correct = 0usize;
    for &(q, r) in pairs.pairs() {
        if q >= scores.len() || r >= scores.len() {
            return Err(TupiError::invalid(format!(
                "pair ({q},{r}) out of range for {} predictions",
                scores.len()
            )));
        }
        if scores[q] > scores[r] {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Σ over pairs of max(0, 1 − (f[q] − f[r]))².
pub fn hinge_rank_loss(f: &Predictions, pairs: &RankPairs) -> Result<f64> {
    if pairs.is_empty() {
        return Err(TupiError::invalid("cannot evaluate loss on empty pairs"));
    }
    let scores = f.scores();
    let mut loss = 0.0;
    for &(q, r) in pairs.pairs() {
        if q >= scores.len() || r >= scores.len() {
            return Err(TupiError::invalid(format!(
                "pair ({q},{r}) out of range for {} predictions",
                scores.len()
            )));
        }
        let margin = scores[q] - scores[r];
        let slack = (1.0 - margin).max(0.0);
        loss += slack * slack;
    }
    Ok(loss)
}

/// Linear scorer f(g) = g·w trained on pairwise supervision.
#[derive(Debug, Clone)]
pub struct LinearRanker {
    pub weights: Array1<f64>,
    pub reg: f64,
}

impl LinearRanker {
    pub fn score(&self, features: &FeatureSet) -> Result<Predictions> {
        if features.dim() != self.weights.len() {
            return Err(TupiError::invalid(format!(
                "feature dimension {} does not match ranker dimension {}",
                features.dim(),
                self.weights.len()
            )));
        }
        Predictions::new(features.values().dot(&self.weights))
    }
}

fn ranker_loss(diffs: &Array2<f64>, w: &Array1<f64>, reg: f64) -> f64 {
    let margins = diffs.dot(w);
    let hinge: f64 = margins
        .iter()
        .map(|m| {
            let s = (1.0 - m).max(0.0);
            s * s
        })
        .sum();
    hinge + reg * w.dot(w)
}

/// Full-batch gradient descent (500 steps, backtracking halving) on
/// hinge_rank_loss(G·w) + reg·‖w‖², from w = 0.
pub fn train_linear_ranker(g: &FeatureSet, pairs: &RankPairs, reg: f64) -> Result<LinearRanker> {
    if pairs.is_empty() {
        return Err(TupiError::invalid("cannot train on empty pairs"));
    }
    if !(reg > 0.0) || !reg.is_finite() {
        return Err(TupiError::invalid("regularization must be positive"));
    }
    let d = g.dim();
    let values = g.values();
    let mut diffs = Array2::<f64>::zeros((pairs.len(), d));
    for (p, &(q, r)) in pairs.pairs().iter().enumerate() {
        if q >= g.len() || r >= g.len() {
            return Err(TupiError::invalid(format!(
                "pair ({q},{r}) out of range for {} rows",
                g.len()
            )));
        }
        for c in 0..d {
            diffs[[p, c]] = values[[q, c]] - values[[r, c]];
        }
    }

    let mut w = Array1::<f64>::zeros(d);
    let mut loss = ranker_loss(&diffs, &w, reg);
    for _ in 0..500 {
        let margins = diffs.dot(&w);
        let active = margins.mapv(|m| (1.0 - m).max(0.0));
        let mut grad = diffs.t().dot(&active) * (-2.0);
        grad = grad + &w * (2.0 * reg);
        let gmax = grad.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let wmax = w.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if gmax <= 1e-12 * wmax.max(1.0) {
            break;
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let trial = &w - &(&grad * step);
            let trial_loss = ranker_loss(&diffs, &trial, reg);
            if trial_loss <= loss {
                w = trial;
                loss = trial_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(LinearRanker { weights: w, reg })
}

/// Sample `count` pairs uniformly without replacement from the ordered pairs
/// consistent with y (strict comparisons only). Deterministic under `seed`.
pub fn pairs_from_scores(y: &Predictions, count: usize, seed: u64) -> Result<RankPairs> {
    if count == 0 {
        return Err(TupiError::invalid("pair count must be at least 1"));
    }
    let scores = y.scores();
    let n = scores.len();
    let mut all: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if scores[i] > scores[j] {
                all.push((i, j));
            } else if scores[j] > scores[i] {
                all.push((j, i));
            }
        }
    }
    if all.is_empty() {
        return Err(TupiError::NoOrderedPairs(
            "all scores tied: no strict orderings exist".into(),
        ));
    }
    if count > all.len() {
        return Err(TupiError::invalid(format!(
            "requested {count} pairs but only {} are orderable",
            all.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let j = rng.random_range(i..all.len());
        all.swap(i, j);
    }
    all.truncate(count);
    RankPairs::new(all, n)
}
