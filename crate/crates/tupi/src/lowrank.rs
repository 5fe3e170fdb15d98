//! Nyström factorization K ≈ K_xB · K_BB⁻¹ · K_xBᵀ and the low-rank
//! dependence value/gradient. Everything here stays O(n·K + K²) in memory;
//! no function materializes an n×n matrix, which is what makes the denoising
//! loop affordable at large n.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TupiError};
use crate::types::Predictions;

const JITTER: f64 = 1e-8;
const KMEANS_ITERS: usize = 20;
const KMEANS_SEED: u64 = 0x6b6d_6561_6e73; // "kmeans"

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    IntervalEndpoints,
    ClusterCenters,
    VerbatimPoints,
}

/// Basis rows b_1…b_K in the source feature space.
#[derive(Debug, Clone)]
pub struct BasisSet {
    pub points: Array2<f64>,
    pub kind: BasisKind,
}

/// Low-rank kernel representation: cross-kernel to the basis plus the
/// jitter-regularized inverse basis kernel.
#[derive(Debug, Clone)]
pub struct NystroemFactor {
    pub cross: Array2<f64>,
    pub basis_inv: Array2<f64>,
    pub bandwidth: f64,
    pub source_dim: usize,
}

impl NystroemFactor {
    pub fn n(&self) -> usize {
        self.cross.nrows()
    }

    pub fn rank(&self) -> usize {
        self.cross.ncols()
    }

    /// C·K_xB: subtract each column's mean (implicit centering).
    pub fn centered_cross(&self) -> Array2<f64> {
        center_columns(&self.cross)
    }
}

pub(crate) fn center_columns(m: &Array2<f64>) -> Array2<f64> {
    let means = m.mean_axis(Axis(0)).expect("non-empty matrix");
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        row -= &means;
    }
    out
}

/// Gaussian cross kernel exp(−‖x_i − b_j‖²/σ²) between row sets.
pub(crate) fn cross_kernel(
    values: &ArrayView2<f64>,
    points: &ArrayView2<f64>,
    sigma_sq: f64,
) -> Array2<f64> {
    let n = values.nrows();
    let k = points.nrows();
    let d = values.ncols();
    let mut out = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            let mut d2 = 0.0;
            for c in 0..d {
                let diff = values[[i, c]] - points[[j, c]];
                d2 += diff * diff;
            }
            out[[i, j]] = (-d2 / sigma_sq).exp();
        }
    }
    out
}

fn distinct_rows(values: &ArrayView2<f64>) -> Array2<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for row in values.rows() {
        let candidate: Vec<f64> = row.to_vec();
        if !rows.iter().any(|r| r == &candidate) {
            rows.push(candidate);
        }
    }
    let d = values.ncols();
    let mut out = Array2::<f64>::zeros((rows.len(), d));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out[[i, j]] = *v;
        }
    }
    out
}

fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Seeded Lloyd k-means with greedy farthest-point initialization.
fn kmeans_centers(values: &ArrayView2<f64>, k: usize) -> Array2<f64> {
    let n = values.nrows();
    let d = values.ncols();
    let rows: Vec<Vec<f64>> = values.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(KMEANS_SEED);

    let mut centers: Vec<Vec<f64>> = vec![rows[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let mut best = 0;
        let mut best_dist = -1.0;
        for (i, row) in rows.iter().enumerate() {
            let min_d = centers
                .iter()
                .map(|c| squared_dist(row, c))
                .fold(f64::INFINITY, f64::min);
            if min_d > best_dist {
                best_dist = min_d;
                best = i;
            }
        }
        centers.push(rows[best].clone());
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        for (i, row) in rows.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dd = squared_dist(row, center);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            assignment[i] = best;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == c).collect();
            if members.is_empty() {
                // reseed an empty cluster at the point farthest from its old center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        squared_dist(&rows[a], center)
                            .partial_cmp(&squared_dist(&rows[b], center))
                            .unwrap()
                    })
                    .unwrap();
                *center = rows[far].clone();
                continue;
            }
            for c_dim in 0..d {
                center[c_dim] =
                    members.iter().map(|&i| rows[i][c_dim]).sum::<f64>() / members.len() as f64;
            }
        }
    }

    let mut out = Array2::<f64>::zeros((k, d));
    for (i, c) in centers.iter().enumerate() {
        for (j, v) in c.iter().enumerate() {
            out[[i, j]] = *v;
        }
    }
    out
}

/// Pick K basis rows: interval endpoints for 1-d data, seeded k-means centers
/// for multi-d, the distinct rows verbatim when there are at most K of them.
pub fn select_basis(values: &ArrayView2<f64>, k: usize) -> Result<BasisSet> {
    if k < 2 {
        return Err(TupiError::invalid("basis size K must be at least 2"));
    }
    if values.nrows() < 2 {
        return Err(TupiError::invalid("need at least 2 rows to select a basis"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(TupiError::invalid("non-finite values in basis selection"));
    }
    let distinct = distinct_rows(values);
    if distinct.nrows() < 2 {
        return Err(TupiError::DegenerateRange(
            "all rows identical: no spread to span".into(),
        ));
    }
    if distinct.nrows() <= k {
        return Ok(BasisSet {
            points: distinct,
            kind: BasisKind::VerbatimPoints,
        });
    }
    if values.ncols() == 1 {
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max - min < 1e-12 {
            return Err(TupiError::DegenerateRange(
                "1-d range is numerically empty".into(),
            ));
        }
        let mut points = Array2::<f64>::zeros((k, 1));
        for j in 0..k {
            points[[j, 0]] = min + (max - min) * j as f64 / (k - 1) as f64;
        }
        return Ok(BasisSet {
            points,
            kind: BasisKind::IntervalEndpoints,
        });
    }
    Ok(BasisSet {
        points: kmeans_centers(values, k),
        kind: BasisKind::ClusterCenters,
    })
}

fn invert_basis_kernel(kbb: &Array2<f64>) -> Result<Array2<f64>> {
    let k = kbb.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            if kbb[[i, j]] >= 1.0 - 1e-12 {
                return Err(TupiError::SingularBasis(format!(
                    "basis points {i} and {j} coincide"
                )));
            }
        }
    }
    let mut m = nalgebra::DMatrix::from_fn(k, k, |i, j| kbb[[i, j]]);
    for i in 0..k {
        m[(i, i)] += JITTER;
    }
    let chol = nalgebra::Cholesky::new(m).ok_or_else(|| {
        TupiError::SingularBasis("basis kernel not positive definite after jitter".into())
    })?;
    let inv = chol.inverse();
    let mut out = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            out[[i, j]] = 0.5 * (inv[(i, j)] + inv[(j, i)]);
        }
    }
    Ok(out)
}

/// Factor the kernel of `values` through `basis`: cross = K_xB,
/// basis_inv = (K_BB + 1e-8·I)⁻¹.
pub fn nystroem_factor(
    values: &ArrayView2<f64>,
    basis: &BasisSet,
    sigma_sq: f64,
) -> Result<NystroemFactor> {
    if !(sigma_sq > 0.0) || !sigma_sq.is_finite() {
        return Err(TupiError::invalid("bandwidth must be positive and finite"));
    }
    if basis.points.ncols() != values.ncols() {
        return Err(TupiError::invalid(format!(
            "basis dimension {} does not match values dimension {}",
            basis.points.ncols(),
            values.ncols()
        )));
    }
    if basis.points.nrows() < 2 {
        return Err(TupiError::invalid("basis must contain at least 2 points"));
    }
    let kbb = cross_kernel(&basis.points.view(), &basis.points.view(), sigma_sq);
    let basis_inv = invert_basis_kernel(&kbb)?;
    let cross = cross_kernel(values, &basis.points.view(), sigma_sq);
    Ok(NystroemFactor {
        cross,
        basis_inv,
        bandwidth: sigma_sq,
        source_dim: values.ncols(),
    })
}

/// Dependence tr[K_fB·S_fi] of two factored kernels, with the centering
/// applied as column-mean subtraction: tr[P_f·M·P_h·Mᵀ], M = A_fᵀ·A_h.
/// Structurally nonnegative (a squared Frobenius norm in disguise).
pub fn lowrank_dependence(f_factor: &NystroemFactor, h_factor: &NystroemFactor) -> Result<f64> {
    if f_factor.n() != h_factor.n() {
        return Err(TupiError::invalid(format!(
            "factor instance counts differ: {} vs {}",
            f_factor.n(),
            h_factor.n()
        )));
    }
    let a_f = f_factor.centered_cross();
    let a_h = h_factor.centered_cross();
    Ok(dependence_from_centered(
        &a_f,
        &f_factor.basis_inv,
        &a_h,
        &h_factor.basis_inv,
    ))
}

/// tr[P_f·M·P_h·Mᵀ] with M = A_fᵀ·A_h, all K-sized intermediates.
pub(crate) fn dependence_from_centered(
    a_f: &Array2<f64>,
    p_f: &Array2<f64>,
    a_h: &Array2<f64>,
    p_h: &Array2<f64>,
) -> f64 {
    let m = a_f.t().dot(a_h);
    let left = p_f.dot(&m).dot(p_h);
    left.iter().zip(m.iter()).map(|(x, y)| x * y).sum()
}

/// ∂cross/∂f for 1-d f: dG[k][l] = −2(f_k − b_l)/σ² · G[k][l].
pub(crate) fn cross_kernel_grad_1d(
    f: &Array1<f64>,
    basis: &Array2<f64>,
    g: &Array2<f64>,
    sigma_sq: f64,
) -> Array2<f64> {
    let n = f.len();
    let k = basis.nrows();
    let mut out = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            out[[i, j]] = -2.0 * (f[i] - basis[[j, 0]]) / sigma_sq * g[[i, j]];
        }
    }
    out
}

/// Gradient of lowrank_dependence with respect to each entry of f, holding
/// σ_f² and the basis fixed: grad_k = 2·[∂K_fB]_(k,:)·[S_fi]_(:,k), evaluated
/// as 2·rowsum((dG·P_f·M·P_h) ⊙ A_h).
pub fn lowrank_dependence_gradient(
    f: &Predictions,
    f_basis: &BasisSet,
    sigma_f_sq: f64,
    h_factor: &NystroemFactor,
) -> Result<Array1<f64>> {
    if f_basis.points.ncols() != 1 {
        return Err(TupiError::invalid("prediction basis must be 1-d"));
    }
    if f.len() != h_factor.n() {
        return Err(TupiError::invalid(format!(
            "prediction length {} does not match factor instance count {}",
            f.len(),
            h_factor.n()
        )));
    }
    let f_factor = nystroem_factor(&f.as_matrix(), f_basis, sigma_f_sq)?;
    let a_f = f_factor.centered_cross();
    let a_h = h_factor.centered_cross();
    let m = a_f.t().dot(&a_h);
    let r = f_factor.basis_inv.dot(&m).dot(&h_factor.basis_inv);
    let dg = cross_kernel_grad_1d(f.scores(), &f_basis.points, &f_factor.cross, sigma_f_sq);
    let t = dg.dot(&r);
    let mut grad = Array1::<f64>::zeros(f.len());
    for i in 0..f.len() {
        let mut acc = 0.0;
        for j in 0..a_h.ncols() {
            acc += t[[i, j]] * a_h[[i, j]];
        }
        grad[i] = 2.0 * acc;
    }
    Ok(grad)
}
