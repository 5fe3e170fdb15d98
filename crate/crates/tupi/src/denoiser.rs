//! The iterative refinement loop. Each outer iteration freezes the bandwidth
//! and dependence weights at the current iterate f(t), then descends the
//! objective
//!
//!   d²(K̃_f, K̃_f(t)) + λ·Σᵢ wⁱ·d²(K̃_f, K̃_i)
//!
//! by gradient steps with backtracking, and a validation accuracy gate
//! decides when to stop. Large n uses the Nyström path end to end.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Result, TupiError};
use crate::kernels::{
    ambient_distance, bandwidth_heuristic, double_center, embed_predictions, gaussian_kernel,
    CenteredEmbedding,
};
use crate::lowrank::{
    center_columns, cross_kernel, cross_kernel_grad_1d, dependence_from_centered, nystroem_factor,
    select_basis, BasisSet,
};
use crate::ranking::{rank_accuracy, RankPairs};
use crate::types::{standardize, FeatureSet, Predictions};

/// Hyperparameters of one denoising run.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseConfig {
    /// Feature-term weight λ. Zero is allowed and turns the loop into a no-op.
    pub lambda: f64,
    /// Weight-uniformity scale σ_w²: large → uniform weights, small → winner-take-all.
    pub sigma_w_sq: f64,
    /// Outer iteration cap T (0 permitted: return the input untouched).
    pub max_iters: usize,
    /// Nyström rank K; the low-rank path engages when rank < n.
    pub rank: usize,
    /// Gradient steps per outer iteration.
    pub inner_steps: usize,
    /// Initial descent step; scaled by n^{-1/2} at use.
    pub step_size: f64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            sigma_w_sq: 1.0,
            max_iters: 50,
            rank: 50,
            inner_steps: 20,
            step_size: 0.1,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(TupiError::invalid("lambda must be a finite nonnegative real"));
        }
        if !(self.sigma_w_sq > 0.0) || !self.sigma_w_sq.is_finite() {
            return Err(TupiError::invalid("sigma_w_sq must be positive"));
        }
        if self.max_iters > 1000 {
            return Err(TupiError::invalid("max_iters must be at most 1000"));
        }
        if self.rank < 2 {
            return Err(TupiError::invalid("rank must be at least 2"));
        }
        if self.inner_steps == 0 {
            return Err(TupiError::invalid("inner_steps must be positive"));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(TupiError::invalid("step_size must be positive"));
        }
        Ok(())
    }
}

/// The evolving iterate f(t) with its frozen per-iteration weights.
#[derive(Debug, Clone)]
pub struct DenoiseState {
    pub t: usize,
    pub current: Predictions,
    pub weights: Array1<f64>,
    pub validation_accuracy: f64,
}

impl DenoiseState {
    pub fn initial(f: Predictions, feature_count: usize, validation_accuracy: f64) -> Self {
        let m = feature_count.max(1);
        Self {
            t: 0,
            current: f,
            weights: Array1::from_elem(m, 1.0 / m as f64),
            validation_accuracy,
        }
    }
}

/// Outcome of one outer iteration.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub state: DenoiseState,
    /// True when no non-increasing step existed at the very first inner step;
    /// the state is returned unchanged in that case.
    pub stalled: bool,
    pub objective_start: f64,
    pub objective_end: f64,
}

/// Full run artifact.
#[derive(Debug, Clone)]
pub struct DenoiseReport {
    pub final_predictions: Predictions,
    pub iterations_run: usize,
    pub accuracy_trace: Vec<f64>,
    pub weight_trace: Vec<Array1<f64>>,
}

/// Optional quadratic term coeff·fᵀLf added to the objective (used by the
/// combined baseline; coeff 0 adds exact zeros and changes nothing).
#[derive(Debug, Clone)]
pub(crate) struct QuadraticPenalty {
    pub matrix: Array2<f64>,
    pub coeff: f64,
}

impl QuadraticPenalty {
    fn value(&self, f: &Array1<f64>) -> f64 {
        self.coeff * f.dot(&self.matrix.dot(f))
    }

    fn add_gradient(&self, f: &Array1<f64>, grad: &mut Array1<f64>) {
        let lf = self.matrix.dot(f);
        grad.scaled_add(2.0 * self.coeff, &lf);
    }
}

enum PreparedInner {
    /// Double-centered feature kernels C·K_i·C with their squared norms.
    Dense { centered: Vec<Array2<f64>>, self_dep: Vec<f64> },
    /// Column-centered Nyström crosses with inverse basis kernels.
    LowRank {
        centered: Vec<Array2<f64>>,
        basis_inv: Vec<Array2<f64>>,
        self_dep: Vec<f64>,
        rank: usize,
    },
}

/// Feature-side quantities that never change during a run, built once.
pub struct PreparedFeatures {
    inner: PreparedInner,
    n: usize,
    m: usize,
}

impl PreparedFeatures {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn feature_count(&self) -> usize {
        self.m
    }

    pub fn is_lowrank(&self) -> bool {
        matches!(self.inner, PreparedInner::LowRank { .. })
    }
}

/// Precompute per-feature kernel structure; the low-rank path engages when
/// rank < n.
pub fn prepare_features(features: &[FeatureSet], rank: usize) -> Result<PreparedFeatures> {
    if features.is_empty() {
        return Err(TupiError::invalid("need at least one feature set"));
    }
    let n = features[0].len();
    if features.iter().any(|f| f.len() != n) {
        return Err(TupiError::invalid(
            "all feature sets must share the instance count",
        ));
    }
    if n < 2 {
        return Err(TupiError::invalid("need at least 2 instances"));
    }
    let m = features.len();
    if rank < n {
        let mut centered = Vec::with_capacity(m);
        let mut basis_inv = Vec::with_capacity(m);
        let mut self_dep = Vec::with_capacity(m);
        for fs in features {
            let sigma_sq = bandwidth_heuristic(&fs.values().view())?;
            let basis = select_basis(&fs.values().view(), rank)?;
            let factor = nystroem_factor(&fs.values().view(), &basis, sigma_sq)?;
            let a = factor.centered_cross();
            let d = dependence_from_centered(&a, &factor.basis_inv, &a, &factor.basis_inv);
            if d <= 0.0 {
                return Err(TupiError::DegenerateEmbedding(format!(
                    "feature '{}' has no variation after centering",
                    fs.name()
                )));
            }
            centered.push(a);
            basis_inv.push(factor.basis_inv);
            self_dep.push(d);
        }
        Ok(PreparedFeatures {
            inner: PreparedInner::LowRank {
                centered,
                basis_inv,
                self_dep,
                rank,
            },
            n,
            m,
        })
    } else {
        let mut centered = Vec::with_capacity(m);
        let mut self_dep = Vec::with_capacity(m);
        for fs in features {
            let sigma_sq = bandwidth_heuristic(&fs.values().view())?;
            let kernel = gaussian_kernel(&fs.values().view(), sigma_sq)?;
            let b = double_center(&kernel.entries);
            let d: f64 = b.iter().map(|v| v * v).sum();
            if d <= 0.0 {
                return Err(TupiError::DegenerateEmbedding(format!(
                    "feature '{}' has no variation after centering",
                    fs.name()
                )));
            }
            centered.push(b);
            self_dep.push(d);
        }
        Ok(PreparedFeatures {
            inner: PreparedInner::Dense { centered, self_dep },
            n,
            m,
        })
    }
}

/// Softmin weights wⁱ ∝ exp(−dᵢ/σ_w²), max-subtracted for stability,
/// normalized onto the simplex.
pub fn weights_from_distances(distances: &[f64], sigma_w_sq: f64) -> Array1<f64> {
    let args: Vec<f64> = distances.iter().map(|d| -d / sigma_w_sq).collect();
    let amax = args.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = args.iter().map(|a| (a - amax).exp()).collect();
    let total: f64 = exps.iter().sum();
    Array1::from_vec(exps.into_iter().map(|e| e / total).collect())
}

/// wⁱ ∝ exp(−d²(K̃_f, K̃_i)/σ_w²), normalized to sum to 1.
pub fn compute_weights(
    f_embed: &CenteredEmbedding,
    feature_embeds: &[CenteredEmbedding],
    sigma_w_sq: f64,
) -> Result<Array1<f64>> {
    if feature_embeds.is_empty() {
        return Err(TupiError::invalid("need at least one feature embedding"));
    }
    if !(sigma_w_sq > 0.0) || !sigma_w_sq.is_finite() {
        return Err(TupiError::invalid("sigma_w_sq must be positive"));
    }
    let mut distances = Vec::with_capacity(feature_embeds.len());
    for e in feature_embeds {
        distances.push(ambient_distance(f_embed, e)?);
    }
    Ok(weights_from_distances(&distances, sigma_w_sq))
}

/// Dense objective d²(K̃_f, K̃_f(t)) + λ·Σᵢ wⁱ·d²(K̃_f, K̃_i).
pub fn objective(
    f: &Predictions,
    snapshot_embed: &CenteredEmbedding,
    feature_embeds: &[CenteredEmbedding],
    weights: &Array1<f64>,
    lambda: f64,
) -> Result<f64> {
    if weights.len() != feature_embeds.len() {
        return Err(TupiError::invalid(
            "weight count must match feature embedding count",
        ));
    }
    let wsum: f64 = weights.sum();
    if weights.iter().any(|&w| w < -1e-9) || (wsum - 1.0).abs() > 1e-6 {
        return Err(TupiError::invalid("weights must lie on the simplex"));
    }
    let f_embed = embed_predictions(f).map_err(|e| {
        TupiError::DegenerateEmbedding(format!("cannot embed predictions: {e}"))
    })?;
    let mut value = ambient_distance(&f_embed, snapshot_embed)?;
    for (e, &w) in feature_embeds.iter().zip(weights.iter()) {
        value += lambda * w * ambient_distance(&f_embed, e)?;
    }
    Ok(value)
}

/// Everything frozen for the inner descent of one outer iteration.
struct IterationContext<'a> {
    prepared: &'a PreparedFeatures,
    /// Snapshot embedding data (same representation as the feature side).
    snapshot_centered: Array2<f64>,
    snapshot_basis_inv: Option<Array2<f64>>,
    /// Low-rank only: basis for the evolving f and its inverse basis kernel.
    f_basis: Option<BasisSet>,
    f_basis_inv: Option<Array2<f64>>,
    sigma_f_sq: f64,
    /// Coefficients per embedding: snapshot first (1.0), then λ·wⁱ.
    coeffs: Vec<f64>,
    self_deps: Vec<f64>,
    penalty: Option<&'a QuadraticPenalty>,
}

struct EvalCache {
    /// Low-rank: raw cross kernel G and centered A_f. Dense: K_f and C·K_f·C.
    raw: Array2<f64>,
    centered: Array2<f64>,
    d_ff: f64,
    /// Cross dependences D_f,i per embedding (snapshot first).
    d_cross: Vec<f64>,
}

impl<'a> IterationContext<'a> {
    /// Objective value at f, with the pieces the gradient needs.
    fn eval(&self, f: &Array1<f64>) -> Result<(f64, EvalCache)> {
        match &self.prepared.inner {
            PreparedInner::LowRank {
                centered, basis_inv, ..
            } => {
                let basis = self.f_basis.as_ref().expect("lowrank context has basis");
                let p_f = self.f_basis_inv.as_ref().expect("lowrank context has P_f");
                let fm = f.view().insert_axis(Axis(1));
                let g = cross_kernel(&fm, &basis.points.view(), self.sigma_f_sq);
                let a_f = center_columns(&g);
                let d_ff = dependence_from_centered(&a_f, p_f, &a_f, p_f);
                if !(d_ff > 1e-30) {
                    return Err(TupiError::DegenerateEmbedding(
                        "iterate collapsed: embedding has no variation".into(),
                    ));
                }
                let mut d_cross = Vec::with_capacity(1 + centered.len());
                d_cross.push(dependence_from_centered(
                    &a_f,
                    p_f,
                    &self.snapshot_centered,
                    self.snapshot_basis_inv.as_ref().expect("snapshot P"),
                ));
                for (a_i, p_i) in centered.iter().zip(basis_inv.iter()) {
                    d_cross.push(dependence_from_centered(&a_f, p_f, a_i, p_i));
                }
                let mut value = self.assemble(d_ff, &d_cross);
                if let Some(pen) = self.penalty {
                    value += pen.value(f);
                }
                Ok((
                    value,
                    EvalCache {
                        raw: g,
                        centered: a_f,
                        d_ff,
                        d_cross,
                    },
                ))
            }
            PreparedInner::Dense { centered, .. } => {
                let fm = f.view().insert_axis(Axis(1));
                let k_f = cross_kernel(&fm, &fm, self.sigma_f_sq);
                let b_f = double_center(&k_f);
                let d_ff: f64 = b_f.iter().map(|v| v * v).sum();
                if !(d_ff > 1e-30) {
                    return Err(TupiError::DegenerateEmbedding(
                        "iterate collapsed: embedding has no variation".into(),
                    ));
                }
                let mut d_cross = Vec::with_capacity(1 + centered.len());
                d_cross.push(frobenius_inner(&b_f, &self.snapshot_centered));
                for b_i in centered {
                    d_cross.push(frobenius_inner(&b_f, b_i));
                }
                let mut value = self.assemble(d_ff, &d_cross);
                if let Some(pen) = self.penalty {
                    value += pen.value(f);
                }
                Ok((
                    value,
                    EvalCache {
                        raw: k_f,
                        centered: b_f,
                        d_ff,
                        d_cross,
                    },
                ))
            }
        }
    }

    /// Σᵢ cᵢ·(1 − ρᵢ) with ρᵢ = D_fi/√(D_ff·D_ii).
    fn assemble(&self, d_ff: f64, d_cross: &[f64]) -> f64 {
        let mut value = 0.0;
        for ((&c, &d_fi), &d_ii) in self
            .coeffs
            .iter()
            .zip(d_cross.iter())
            .zip(self.self_deps.iter())
        {
            let rho = d_fi / (d_ff * d_ii).sqrt();
            value += c * (1.0 - rho);
        }
        value
    }

    /// Gradient of the assembled objective at the cached iterate.
    fn gradient(&self, f: &Array1<f64>, cache: &EvalCache) -> Array1<f64> {
        let n = f.len();
        let d_ff = cache.d_ff;
        // alpha_i = c_i/sqrt(D_ff D_ii); beta multiplies the shared dD_ff term
        let alphas: Vec<f64> = self
            .coeffs
            .iter()
            .zip(self.self_deps.iter())
            .map(|(&c, &d_ii)| c / (d_ff * d_ii).sqrt())
            .collect();
        let beta: f64 = alphas
            .iter()
            .zip(cache.d_cross.iter())
            .map(|(&a, &d_fi)| a * d_fi / (2.0 * d_ff))
            .sum();

        let mut grad = match &self.prepared.inner {
            PreparedInner::LowRank {
                centered, basis_inv, ..
            } => {
                let basis = self.f_basis.as_ref().expect("lowrank context has basis");
                let p_f = self.f_basis_inv.as_ref().expect("lowrank context has P_f");
                let dg = cross_kernel_grad_1d(f, &basis.points, &cache.raw, self.sigma_f_sq);
                let mut grad = Array1::<f64>::zeros(n);
                // snapshot first, then features: -alpha_i * dD_fi
                let snapshot_p = self.snapshot_basis_inv.as_ref().expect("snapshot P");
                let sides: Vec<(&Array2<f64>, &Array2<f64>)> =
                    std::iter::once((&self.snapshot_centered, snapshot_p))
                        .chain(centered.iter().zip(basis_inv.iter()))
                        .collect();
                for (i, (a_i, p_i)) in sides.into_iter().enumerate() {
                    if alphas[i] == 0.0 {
                        continue;
                    }
                    let m = cache.centered.t().dot(a_i);
                    let r = p_f.dot(&m).dot(p_i);
                    let t = dg.dot(&r);
                    for k in 0..n {
                        let mut acc = 0.0;
                        for c in 0..a_i.ncols() {
                            acc += t[[k, c]] * a_i[[k, c]];
                        }
                        grad[k] -= alphas[i] * 2.0 * acc;
                    }
                }
                // + beta * dD_ff
                let m_ff = cache.centered.t().dot(&cache.centered);
                let r_ff = p_f.dot(&m_ff).dot(p_f);
                let t_ff = dg.dot(&r_ff);
                for k in 0..n {
                    let mut acc = 0.0;
                    for c in 0..cache.centered.ncols() {
                        acc += t_ff[[k, c]] * cache.centered[[k, c]];
                    }
                    grad[k] += beta * 4.0 * acc;
                }
                grad
            }
            PreparedInner::Dense { centered, .. } => {
                // Z = Σ -2·alpha_i·B_i + 4·beta·B_f, then grad_k = Σ_l dK[k,l]·Z[k,l]
                let mut z = &cache.centered * (4.0 * beta);
                z.scaled_add(-2.0 * alphas[0], &self.snapshot_centered);
                for (i, b_i) in centered.iter().enumerate() {
                    if alphas[i + 1] != 0.0 {
                        z.scaled_add(-2.0 * alphas[i + 1], b_i);
                    }
                }
                let mut grad = Array1::<f64>::zeros(n);
                for k in 0..n {
                    let mut acc = 0.0;
                    for l in 0..n {
                        let dk = -2.0 * (f[k] - f[l]) / self.sigma_f_sq * cache.raw[[k, l]];
                        acc += dk * z[[k, l]];
                    }
                    grad[k] = acc;
                }
                grad
            }
        };
        if let Some(pen) = self.penalty {
            pen.add_gradient(f, &mut grad);
        }
        grad
    }
}

fn frobenius_inner(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Build the frozen per-iteration context from f(t): bandwidth, snapshot
/// embedding, dependence weights.
fn build_context<'a>(
    state: &DenoiseState,
    prepared: &'a PreparedFeatures,
    config: &DenoiseConfig,
    penalty: Option<&'a QuadraticPenalty>,
) -> Result<(IterationContext<'a>, Array1<f64>)> {
    let sigma_f_sq = bandwidth_heuristic(&state.current.as_matrix())?;
    let (snapshot_centered, snapshot_basis_inv, snapshot_self_dep, f_basis, f_basis_inv, dists) =
        match &prepared.inner {
            PreparedInner::LowRank {
                centered,
                basis_inv,
                self_dep,
                rank,
            } => {
                let basis = select_basis(&state.current.as_matrix(), *rank)?;
                let factor = nystroem_factor(&state.current.as_matrix(), &basis, sigma_f_sq)?;
                let a_t = factor.centered_cross();
                let p_t = factor.basis_inv.clone();
                let d_tt = dependence_from_centered(&a_t, &p_t, &a_t, &p_t);
                if !(d_tt > 1e-30) {
                    return Err(TupiError::DegenerateEmbedding(
                        "iterate has no variation after centering".into(),
                    ));
                }
                let mut dists = Vec::with_capacity(centered.len());
                for ((a_i, p_i), &d_ii) in
                    centered.iter().zip(basis_inv.iter()).zip(self_dep.iter())
                {
                    let d_ti = dependence_from_centered(&a_t, &p_t, a_i, p_i);
                    dists.push(1.0 - d_ti / (d_tt * d_ii).sqrt());
                }
                (a_t, Some(p_t), d_tt, Some(basis), Some(factor.basis_inv), dists)
            }
            PreparedInner::Dense { centered, self_dep } => {
                let kernel = gaussian_kernel(&state.current.as_matrix(), sigma_f_sq)?;
                let b_t = double_center(&kernel.entries);
                let d_tt: f64 = b_t.iter().map(|v| v * v).sum();
                if !(d_tt > 1e-30) {
                    return Err(TupiError::DegenerateEmbedding(
                        "iterate has no variation after centering".into(),
                    ));
                }
                let mut dists = Vec::with_capacity(centered.len());
                for (b_i, &d_ii) in centered.iter().zip(self_dep.iter()) {
                    let d_ti = frobenius_inner(&b_t, b_i);
                    dists.push(1.0 - d_ti / (d_tt * d_ii).sqrt());
                }
                (b_t, None, d_tt, None, None, dists)
            }
        };
    let weights = weights_from_distances(&dists, config.sigma_w_sq);
    let mut coeffs = Vec::with_capacity(1 + prepared.m);
    coeffs.push(1.0);
    for &w in weights.iter() {
        coeffs.push(config.lambda * w);
    }
    let mut self_deps = Vec::with_capacity(1 + prepared.m);
    self_deps.push(snapshot_self_dep);
    match &prepared.inner {
        PreparedInner::LowRank { self_dep, .. } => self_deps.extend_from_slice(self_dep),
        PreparedInner::Dense { self_dep, .. } => self_deps.extend_from_slice(self_dep),
    }
    Ok((
        IterationContext {
            prepared,
            snapshot_centered,
            snapshot_basis_inv,
            f_basis,
            f_basis_inv,
            sigma_f_sq,
            coeffs,
            self_deps,
            penalty,
        },
        weights,
    ))
}

const MAX_HALVINGS: usize = 20;

pub(crate) fn denoise_step_with_penalty(
    state: &DenoiseState,
    features: &PreparedFeatures,
    config: &DenoiseConfig,
    penalty: Option<&QuadraticPenalty>,
) -> Result<StepResult> {
    config.validate()?;
    if state.current.len() != features.n() {
        return Err(TupiError::invalid(format!(
            "state has {} predictions but features have {} instances",
            state.current.len(),
            features.n()
        )));
    }
    let (ctx, weights) = build_context(state, features, config, penalty)?;
    let n = state.current.len();
    let mut f_cur = state.current.scores().clone();
    let (mut obj_cur, mut cache) = ctx.eval(&f_cur)?;
    let objective_start = obj_cur;
    let step0 = config.step_size / (n as f64).sqrt();

    // the step carries across inner iterations, doubling after each accepted
    // move, so the inner loop homes in on the frozen subproblem's minimizer
    let mut stalled = false;
    let mut step = step0;
    for inner in 0..config.inner_steps {
        let grad = ctx.gradient(&f_cur, &cache);
        let gmax = grad.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let fmax = f_cur.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if gmax <= 1e-13 * fmax.max(1.0) {
            break; // converged, not a stall
        }
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial = &f_cur - &(&grad * step);
            match ctx.eval(&trial) {
                Ok((obj_new, cache_new)) if obj_new <= obj_cur => {
                    f_cur = trial;
                    obj_cur = obj_new;
                    cache = cache_new;
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            if inner == 0 {
                stalled = true;
            }
            break;
        }
        step = (step * 2.0).min(step0 * 1e12);
    }

    if stalled {
        return Ok(StepResult {
            state: state.clone(),
            stalled: true,
            objective_start,
            objective_end: objective_start,
        });
    }
    Ok(StepResult {
        state: DenoiseState {
            t: state.t + 1,
            current: Predictions::new(f_cur)?,
            weights,
            validation_accuracy: state.validation_accuracy,
        },
        stalled: false,
        objective_start,
        objective_end: obj_cur,
    })
}

/// One outer iteration: recompute weights from f(t), descend the objective
/// for `inner_steps` backtracking gradient steps, increment t.
pub fn denoise_step(
    state: &DenoiseState,
    features: &PreparedFeatures,
    config: &DenoiseConfig,
) -> Result<StepResult> {
    denoise_step_with_penalty(state, features, config, None)
}

fn immediate_report(f_initial: &Predictions, acc0: f64) -> DenoiseReport {
    DenoiseReport {
        final_predictions: f_initial.clone(),
        iterations_run: 0,
        accuracy_trace: vec![acc0],
        weight_trace: Vec::new(),
    }
}

pub(crate) fn run_with_penalty(
    f_initial: &Predictions,
    features: &[FeatureSet],
    config: &DenoiseConfig,
    validation: &RankPairs,
    penalty: Option<&QuadraticPenalty>,
) -> Result<DenoiseReport> {
    config.validate()?;
    if features.is_empty() {
        return Err(TupiError::invalid("need at least one feature set"));
    }
    if validation.is_empty() {
        return Err(TupiError::invalid("validation pairs must be nonempty"));
    }
    if features.iter().any(|fs| fs.len() != f_initial.len()) {
        return Err(TupiError::invalid(
            "feature sets and predictions must share the instance count",
        ));
    }
    let acc0 = rank_accuracy(f_initial, validation)?;
    if config.max_iters == 0 {
        return Ok(immediate_report(f_initial, acc0));
    }
    // the pinned step size assumes unit-scale predictions; every quantity the
    // gate sees (embeddings, accuracies) is invariant to this affine map
    let standardized = match standardize(f_initial.scores()) {
        Ok(v) => v,
        Err(_) => return Ok(immediate_report(f_initial, acc0)),
    };
    let prepared = prepare_features(features, config.rank)?;
    let mut state = DenoiseState::initial(Predictions::new(standardized)?, features.len(), acc0);
    let mut accuracy_trace = vec![acc0];
    let mut weight_trace = Vec::new();
    let mut best: Option<Predictions> = None;
    let mut best_acc = acc0;
    let mut iterations_run = 0;

    for _ in 0..config.max_iters {
        let step = denoise_step_with_penalty(&state, &prepared, config, penalty)?;
        iterations_run += 1;
        if step.stalled {
            break;
        }
        let acc = rank_accuracy(&step.state.current, validation)?;
        accuracy_trace.push(acc);
        weight_trace.push(step.state.weights.clone());
        state = step.state;
        state.validation_accuracy = acc;
        if acc > best_acc {
            best_acc = acc;
            best = Some(state.current.clone());
        } else {
            break; // first failure to strictly increase ends the run
        }
    }

    Ok(DenoiseReport {
        final_predictions: best.unwrap_or_else(|| f_initial.clone()),
        iterations_run,
        accuracy_trace,
        weight_trace,
    })
}

/// Objective of the frozen subproblem one outer iteration minimizes: feature
/// embeddings, softmin weights, the iterate basis, and the iterate bandwidth
/// are all pinned at `f_snapshot`, and the value is taken at `f`. Exposed so
/// the analytic gradient can be verified against finite differences from
/// outside the crate.
pub fn step_objective(
    f_snapshot: &Predictions,
    f: &Array1<f64>,
    features: &[FeatureSet],
    config: &DenoiseConfig,
) -> Result<f64> {
    with_snapshot_context(f_snapshot, f, features, config, |ctx| Ok(ctx.eval(f)?.0))
}

/// Analytic gradient of [`step_objective`] with respect to `f`.
pub fn step_gradient(
    f_snapshot: &Predictions,
    f: &Array1<f64>,
    features: &[FeatureSet],
    config: &DenoiseConfig,
) -> Result<Array1<f64>> {
    with_snapshot_context(f_snapshot, f, features, config, |ctx| {
        let (_, cache) = ctx.eval(f)?;
        Ok(ctx.gradient(f, &cache))
    })
}

fn with_snapshot_context<R>(
    f_snapshot: &Predictions,
    f: &Array1<f64>,
    features: &[FeatureSet],
    config: &DenoiseConfig,
    use_ctx: impl FnOnce(&IterationContext) -> Result<R>,
) -> Result<R> {
    config.validate()?;
    if f.len() != f_snapshot.len() {
        return Err(TupiError::invalid(format!(
            "trial point has {} entries but the snapshot has {}",
            f.len(),
            f_snapshot.len()
        )));
    }
    let prepared = prepare_features(features, config.rank)?;
    if f_snapshot.len() != prepared.n() {
        return Err(TupiError::invalid(format!(
            "snapshot has {} predictions but features have {} instances",
            f_snapshot.len(),
            prepared.n()
        )));
    }
    let state = DenoiseState::initial(f_snapshot.clone(), features.len(), 0.0);
    let (ctx, _) = build_context(&state, &prepared, config, None)?;
    use_ctx(&ctx)
}

/// Iterate denoise_step with the validation gate: stop the first time
/// validation accuracy fails to strictly increase and return the best-so-far
/// iterate (never worse than f_initial on validation).
pub fn run(
    f_initial: &Predictions,
    features: &[FeatureSet],
    config: &DenoiseConfig,
    validation: &RankPairs,
) -> Result<DenoiseReport> {
    run_with_penalty(f_initial, features, config, validation, None)
}

/// λ × σ_w² grid over five logarithmic steps 10⁻²…10².
pub fn default_grid() -> Vec<(f64, f64)> {
    let steps = [1e-2, 1e-1, 1.0, 1e1, 1e2];
    let mut grid = Vec::with_capacity(25);
    for &lambda in &steps {
        for &sigma in &steps {
            grid.push((lambda, sigma));
        }
    }
    grid
}

/// Run every (λ, σ_w²) cell and keep the best validation accuracy; ties break
/// toward smaller λ, then smaller σ_w², then earliest listing.
pub fn tune(
    f_initial: &Predictions,
    features: &[FeatureSet],
    validation: &RankPairs,
    grid: &[(f64, f64)],
    base: &DenoiseConfig,
) -> Result<(DenoiseConfig, DenoiseReport)> {
    if grid.is_empty() {
        return Err(TupiError::invalid("hyperparameter grid must be nonempty"));
    }
    let mut best: Option<(f64, DenoiseConfig, DenoiseReport)> = None;
    for &(lambda, sigma_w_sq) in grid {
        let config = DenoiseConfig {
            lambda,
            sigma_w_sq,
            ..base.clone()
        };
        let report = run(f_initial, features, &config, validation)?;
        let acc = rank_accuracy(&report.final_predictions, validation)?;
        let better = match &best {
            None => true,
            Some((best_acc, best_cfg, _)) => {
                acc > *best_acc
                    || (acc == *best_acc
                        && (lambda < best_cfg.lambda
                            || (lambda == best_cfg.lambda && sigma_w_sq < best_cfg.sigma_w_sq)))
            }
        };
        if better {
            best = Some((acc, config, report));
        }
    }
    let (_, config, report) = best.expect("nonempty grid");
    Ok((config, report))
}
