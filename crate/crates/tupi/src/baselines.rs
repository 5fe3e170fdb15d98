//! Comparison methods: CoConut-style Laplacian smoothing adapted to ranking,
//! Laplacian-regularized SSL ranking from validation pairs, and the two ways
//! of combining CoConut with the denoising loop (joint objective, and
//! pick-the-better-by-validation).

use ndarray::{Array1, Array2};

use crate::denoiser::{run_with_penalty, DenoiseConfig, QuadraticPenalty};
use crate::error::{Result, TupiError};
use crate::ranking::{rank_accuracy, RankPairs};
use crate::types::{FeatureSet, Predictions};

/// Symmetrized k-NN graph over feature rows with its Laplacian L = D − W.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    pub laplacian: Array2<f64>,
    pub k: usize,
    /// Mean of the per-row kernel scales σ^C used during construction.
    pub sigma_c: f64,
}

impl NeighborGraph {
    pub fn n(&self) -> usize {
        self.laplacian.nrows()
    }

    /// fᵀ·L·f, the smoothness quadratic.
    pub fn quadratic(&self, f: &Array1<f64>) -> f64 {
        f.dot(&self.laplacian.dot(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoconutConfig {
    pub lambda_c: f64,
    pub k_c: usize,
}

impl CoconutConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.lambda_c >= 0.0) || !self.lambda_c.is_finite() {
            return Err(TupiError::invalid("lambda_c must be finite and nonnegative"));
        }
        if self.k_c == 0 || self.k_c >= n {
            return Err(TupiError::invalid(format!(
                "k_c must satisfy 1 <= k_c < n (got k_c = {}, n = {n})",
                self.k_c
            )));
        }
        Ok(())
    }

    pub fn penalty_coeff(&self) -> f64 {
        self.lambda_c / self.k_c as f64
    }
}

/// Per-row Gaussian weights over the k nearest neighbors, symmetrized, with
/// per-row scale σ_i^C = twice the mean distance to those neighbors.
pub fn knn_laplacian(h: &FeatureSet, k: usize) -> Result<NeighborGraph> {
    let n = h.len();
    if k == 0 || k >= n {
        return Err(TupiError::invalid(format!(
            "neighbor count must satisfy 1 <= k < n (got k = {k}, n = {n})"
        )));
    }
    let values = h.values();
    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = values
                .row(i)
                .iter()
                .zip(values.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let d = d.sqrt();
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    let mut off_diag: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            off_diag.push(dist[[i, j]]);
        }
    }
    off_diag.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let global_median = off_diag[off_diag.len() / 2];
    if global_median < 1e-12 {
        return Err(TupiError::DegenerateScale(
            "more than half of all point pairs coincide".into(),
        ));
    }

    let mut w = Array2::<f64>::zeros((n, n));
    let mut sigma_sum = 0.0;
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            dist[[i, a]]
                .partial_cmp(&dist[[i, b]])
                .expect("finite distances")
                .then(a.cmp(&b))
        });
        let neighbors = &order[..k];
        let mean_dist: f64 = neighbors.iter().map(|&j| dist[[i, j]]).sum::<f64>() / k as f64;
        let mut sigma = 2.0 * mean_dist;
        if sigma < 1e-12 {
            sigma = global_median; // duplicates collapsed the local scale
        }
        sigma_sum += sigma;
        for &j in neighbors {
            w[[i, j]] = (-dist[[i, j]] * dist[[i, j]] / (sigma * sigma)).exp();
        }
    }
    let mut laplacian = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                laplacian[[i, j]] = -(w[[i, j]] + w[[j, i]]) / 2.0;
            }
        }
    }
    for i in 0..n {
        let row_sum: f64 = (0..n).filter(|&j| j != i).map(|j| laplacian[[i, j]]).sum();
        laplacian[[i, i]] = -row_sum;
    }
    Ok(NeighborGraph {
        laplacian,
        k,
        sigma_c: sigma_sum / n as f64,
    })
}

/// Exact minimizer of ‖v − f^I‖² + (λ^C/k^C)·vᵀLv, a symmetric
/// positive-definite solve.
pub fn coconut_refine(
    f_initial: &Predictions,
    graph: &NeighborGraph,
    config: &CoconutConfig,
) -> Result<Predictions> {
    let n = f_initial.len();
    config.validate(n)?;
    if graph.n() != n {
        return Err(TupiError::invalid(format!(
            "graph has {} nodes but predictions have {n} entries",
            graph.n()
        )));
    }
    let coeff = config.penalty_coeff();
    let mut system = nalgebra::DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            system[(i, j)] = coeff * graph.laplacian[[i, j]];
        }
        system[(i, i)] += 1.0;
    }
    let rhs = nalgebra::DVector::from_iterator(n, f_initial.scores().iter().cloned());
    let chol = system
        .clone()
        .cholesky()
        .ok_or_else(|| TupiError::NumericalFailure("smoothing system is not SPD".into()))?;
    let v = chol.solve(&rhs);
    let residual = (&system * &v - &rhs).norm();
    let rhs_norm = rhs.norm();
    if residual >= 1e-8 * rhs_norm {
        return Err(TupiError::NumericalFailure(format!(
            "solve residual {residual:.3e} exceeds 1e-8 * {rhs_norm:.3e}"
        )));
    }
    Predictions::from_vec(v.iter().cloned().collect())
}

const SSL_STEPS: usize = 500;
const SSL_MAX_HALVINGS: usize = 20;

/// Minimize hinge_rank_loss(f, validation) + λ_ssl·fᵀLf by backtracking
/// gradient descent from f = 0, with the graph built from H.
pub fn ssl_laplacian_rank(
    h: &FeatureSet,
    validation: &RankPairs,
    graph_k: usize,
    lambda_ssl: f64,
) -> Result<Predictions> {
    if validation.is_empty() {
        return Err(TupiError::invalid("validation pairs must be nonempty"));
    }
    if !(lambda_ssl >= 0.0) || !lambda_ssl.is_finite() {
        return Err(TupiError::invalid("lambda_ssl must be finite and nonnegative"));
    }
    let n = h.len();
    for &(q, r) in validation.pairs() {
        if q >= n || r >= n {
            return Err(TupiError::invalid(format!(
                "validation pair ({q}, {r}) out of range for {n} instances"
            )));
        }
    }
    let graph = knn_laplacian(h, graph_k)?;
    let objective = |f: &Array1<f64>| -> f64 {
        hinge_loss_raw(f, validation) + lambda_ssl * graph.quadratic(f)
    };
    let gradient = |f: &Array1<f64>| -> Array1<f64> {
        let mut g = Array1::<f64>::zeros(n);
        for &(q, r) in validation.pairs() {
            let margin = 1.0 - (f[q] - f[r]);
            if margin > 0.0 {
                g[q] -= 2.0 * margin;
                g[r] += 2.0 * margin;
            }
        }
        g.scaled_add(2.0 * lambda_ssl, &graph.laplacian.dot(f));
        g
    };

    let mut f = Array1::<f64>::zeros(n);
    let mut obj = objective(&f);
    let mut step = 1.0;
    for _ in 0..SSL_STEPS {
        let g = gradient(&f);
        let gmax = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let fmax = f.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if gmax <= 1e-12 * fmax.max(1.0) {
            break;
        }
        let mut accepted = false;
        for _ in 0..=SSL_MAX_HALVINGS {
            let trial = &f - &(&g * step);
            let trial_obj = objective(&trial);
            if trial_obj <= obj {
                f = trial;
                obj = trial_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        step *= 2.0;
    }
    Predictions::new(f)
}

fn hinge_loss_raw(f: &Array1<f64>, pairs: &RankPairs) -> f64 {
    let mut loss = 0.0;
    for &(q, r) in pairs.pairs() {
        let margin = 1.0 - (f[q] - f[r]);
        if margin > 0.0 {
            loss += margin * margin;
        }
    }
    loss
}

/// The joint objective: the denoising loop with (λ^C/k^C)·fᵀLf added to
/// every inner objective.
pub fn combined_refine(
    f_initial: &Predictions,
    features: &[FeatureSet],
    config: &DenoiseConfig,
    graph: &NeighborGraph,
    coconut: &CoconutConfig,
    validation: &RankPairs,
) -> Result<Predictions> {
    let n = f_initial.len();
    coconut.validate(n)?;
    if graph.n() != n {
        return Err(TupiError::invalid(format!(
            "graph has {} nodes but predictions have {n} entries",
            graph.n()
        )));
    }
    let penalty = QuadraticPenalty {
        matrix: graph.laplacian.clone(),
        coeff: coconut.penalty_coeff(),
    };
    let report = run_with_penalty(f_initial, features, config, validation, Some(&penalty))?;
    Ok(report.final_predictions)
}

/// Keep whichever candidate ranks the validation pairs best; ties go to the
/// earlier entry.
pub fn select_by_validation(
    candidates: &[(String, Predictions)],
    validation: &RankPairs,
) -> Result<(String, Predictions)> {
    if candidates.is_empty() {
        return Err(TupiError::invalid("need at least one candidate"));
    }
    let mut best: Option<(f64, &(String, Predictions))> = None;
    for cand in candidates {
        let acc = rank_accuracy(&cand.1, validation)?;
        match &best {
            Some((best_acc, _)) if acc <= *best_acc => {}
            _ => best = Some((acc, cand)),
        }
    }
    let (_, cand) = best.expect("nonempty candidates");
    Ok(cand.clone())
}
