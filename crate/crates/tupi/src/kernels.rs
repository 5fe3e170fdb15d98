//! Gaussian kernels, bandwidth heuristics, and the centered/normalized kernel
//! embeddings on which the whole refinement pipeline operates. An embedding is
//! K·C / ‖C·K·C‖_F with C = I − (1/n)·11ᵀ, so its self inner product is
//! exactly 1 and the dependence between two embeddings is their trace inner
//! product.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Result, TupiError};
use crate::types::Predictions;

/// Symmetric Gaussian kernel matrix together with the squared bandwidth that
/// produced it.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub entries: Array2<f64>,
    pub bandwidth: f64,
}

/// A kernel matrix right-centered and scaled onto the unit sphere:
/// K·C / ‖C·K·C‖_F. Row sums are zero and tr[K̃·K̃] = 1.
#[derive(Debug, Clone)]
pub struct CenteredEmbedding {
    pub entries: Array2<f64>,
}

impl CenteredEmbedding {
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    /// Trace inner product tr[A·B].
    pub fn inner_product(&self, other: &CenteredEmbedding) -> Result<f64> {
        if self.n() != other.n() {
            return Err(TupiError::invalid(format!(
                "embedding dimension mismatch: {} vs {}",
                self.n(),
                other.n()
            )));
        }
        let mut acc = 0.0;
        for i in 0..self.n() {
            for j in 0..self.n() {
                acc += self.entries[[i, j]] * other.entries[[j, i]];
            }
        }
        Ok(acc)
    }
}

fn pairwise_distances(values: &ArrayView2<f64>) -> Vec<f64> {
    let n = values.nrows();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d2 = 0.0;
            for c in 0..values.ncols() {
                let diff = values[[i, c]] - values[[j, c]];
                d2 += diff * diff;
            }
            out.push(d2.sqrt());
        }
    }
    out
}

fn median(sorted: &[f64]) -> f64 {
    let m = sorted.len();
    if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    }
}

/// Squared bandwidth σ² = 2·(population std of pairwise Euclidean distances)².
///
/// Degenerate spreads fall back to the squared median distance, then to 1.0;
/// fully coincident rows have no usable scale at all.
pub fn bandwidth_heuristic(values: &ArrayView2<f64>) -> Result<f64> {
    let n = values.nrows();
    if n < 2 {
        return Err(TupiError::invalid("need at least 2 rows for a bandwidth"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(TupiError::invalid("non-finite values in bandwidth input"));
    }
    let dists = pairwise_distances(values);
    let count = dists.len() as f64;
    let max = dists.iter().cloned().fold(0.0, f64::max);
    if max < 1e-12 {
        return Err(TupiError::DegenerateScale(
            "all rows identical: every pairwise distance is zero".into(),
        ));
    }
    let mean = dists.iter().sum::<f64>() / count;
    let var = dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / count;
    let std = var.sqrt();
    if std >= 1e-12 {
        return Ok(2.0 * std * std);
    }
    let mut sorted = dists;
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = median(&sorted);
    if med >= 1e-12 {
        return Ok(med * med);
    }
    Ok(1.0)
}

/// entries[k][l] = exp(−‖row_k − row_l‖² / σ²).
pub fn gaussian_kernel(values: &ArrayView2<f64>, sigma_sq: f64) -> Result<KernelMatrix> {
    if !(sigma_sq > 0.0) || !sigma_sq.is_finite() {
        return Err(TupiError::invalid("bandwidth must be positive and finite"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(TupiError::invalid("non-finite values in kernel input"));
    }
    let n = values.nrows();
    let mut entries = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        entries[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let mut d2 = 0.0;
            for c in 0..values.ncols() {
                let diff = values[[i, c]] - values[[j, c]];
                d2 += diff * diff;
            }
            let k = (-d2 / sigma_sq).exp();
            entries[[i, j]] = k;
            entries[[j, i]] = k;
        }
    }
    Ok(KernelMatrix {
        entries,
        bandwidth: sigma_sq,
    })
}

/// Double centering C·K·C without materializing C.
pub(crate) fn double_center(k: &Array2<f64>) -> Array2<f64> {
    let n = k.nrows() as f64;
    let row_means: Array1<f64> = k.sum_axis(ndarray::Axis(1)) / n;
    let col_means: Array1<f64> = k.sum_axis(ndarray::Axis(0)) / n;
    let grand = k.sum() / (n * n);
    let mut out = k.clone();
    for i in 0..k.nrows() {
        for j in 0..k.ncols() {
            out[[i, j]] = k[[i, j]] - row_means[i] - col_means[j] + grand;
        }
    }
    out
}

/// Embed a kernel as K·C / ‖C·K·C‖_F.
pub fn center_normalize(k: &KernelMatrix) -> Result<CenteredEmbedding> {
    let n = k.entries.nrows();
    if n != k.entries.ncols() || n == 0 {
        return Err(TupiError::invalid("kernel matrix must be square and non-empty"));
    }
    let centered = double_center(&k.entries);
    let frob = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    if frob <= 1e-12 {
        return Err(TupiError::DegenerateEmbedding(
            "kernel has no variation after centering".into(),
        ));
    }
    let nf = n as f64;
    let row_means: Array1<f64> = k.entries.sum_axis(ndarray::Axis(1)) / nf;
    // K·C subtracts each row's mean from that row.
    let mut entries = k.entries.clone();
    for i in 0..n {
        for j in 0..n {
            entries[[i, j]] = (k.entries[[i, j]] - row_means[i]) / frob;
        }
    }
    Ok(CenteredEmbedding { entries })
}

/// Empirical dependence tr[K_v · C · K_w · C].
pub fn hsic_estimate(k_v: &KernelMatrix, k_w: &KernelMatrix) -> Result<f64> {
    let n = k_v.entries.nrows();
    if n != k_w.entries.nrows() {
        return Err(TupiError::invalid(format!(
            "kernel dimension mismatch: {} vs {}",
            n,
            k_w.entries.nrows()
        )));
    }
    let b = double_center(&k_w.entries);
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += k_v.entries[[i, j]] * b[[j, i]];
        }
    }
    Ok(acc)
}

/// d²(A, B) = 1 − tr[A·B]; zero iff the embeddings coincide.
pub fn ambient_distance(a: &CenteredEmbedding, b: &CenteredEmbedding) -> Result<f64> {
    Ok(1.0 - a.inner_product(b)?)
}

/// Heuristic-bandwidth Gaussian embedding of raw feature rows.
pub fn embed_values(values: &ArrayView2<f64>) -> Result<CenteredEmbedding> {
    let sigma_sq = bandwidth_heuristic(values)?;
    let kernel = gaussian_kernel(values, sigma_sq)?;
    center_normalize(&kernel)
}

/// Heuristic-bandwidth Gaussian embedding of a score vector.
pub fn embed_predictions(p: &Predictions) -> Result<CenteredEmbedding> {
    embed_values(&p.as_matrix())
}
