//! Synthetic task generation, experiment orchestration, CSV ingestion, and
//! report emission. Everything here is a pure function of (inputs, seed).

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::baselines::{
    combined_refine, coconut_refine, knn_laplacian, select_by_validation, ssl_laplacian_rank,
    CoconutConfig, NeighborGraph,
};
use crate::denoiser::{default_grid, tune, DenoiseConfig};
use crate::error::{Result, TupiError};
use crate::ranking::{pairs_from_scores, rank_accuracy, train_linear_ranker, RankPairs};
use crate::types::{scale01, FeatureSet, Predictions};

fn default_n() -> usize {
    500
}
fn default_d_base() -> usize {
    5
}
fn default_noise_level() -> f64 {
    0.18
}
fn default_min_dim() -> usize {
    2
}
fn default_max_dim() -> usize {
    20
}
fn default_train_pairs() -> usize {
    200
}
fn default_validation_pairs() -> usize {
    50
}
fn default_test_pairs() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorSpec {
    #[serde(default)]
    pub count: usize,
    #[serde(default = "default_min_dim")]
    pub min_dim: usize,
    #[serde(default = "default_max_dim")]
    pub max_dim: usize,
}

impl Default for DistractorSpec {
    fn default() -> Self {
        Self {
            count: 0,
            min_dim: default_min_dim(),
            max_dim: default_max_dim(),
        }
    }
}

/// Parameters of one synthetic ranking task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_d_base")]
    pub d_base: usize,
    /// Noise on the informative column the initial ranker trains on,
    /// calibrated so that ranker lands at 70-85% test accuracy.
    #[serde(default = "default_noise_level")]
    pub noise_level: f64,
    /// One ground-truth-derived feature per entry: scale01(f*) + N(0, σ²).
    #[serde(default)]
    pub gt_feature_noise: Vec<f64>,
    #[serde(default)]
    pub distractors: DistractorSpec,
    /// Copies of the initial predictions appended as features after the
    /// ranker is trained (run_experiment does the appending, not the
    /// generator, because f^I does not exist until then).
    #[serde(default)]
    pub fi_copies: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_train_pairs")]
    pub train_pairs: usize,
    #[serde(default = "default_validation_pairs")]
    pub validation_pairs: usize,
    #[serde(default = "default_test_pairs")]
    pub test_pairs: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(TupiError::invalid("n must be at least 10"));
        }
        if self.d_base == 0 {
            return Err(TupiError::invalid("d_base must be positive"));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(TupiError::invalid("noise_level must be finite and nonnegative"));
        }
        for &sigma in &self.gt_feature_noise {
            if !(sigma >= 0.0) || !sigma.is_finite() {
                return Err(TupiError::invalid(
                    "ground-truth feature noise levels must be finite and nonnegative",
                ));
            }
        }
        if self.distractors.min_dim == 0 || self.distractors.min_dim > self.distractors.max_dim {
            return Err(TupiError::invalid(
                "distractor dimensions must satisfy 1 <= min_dim <= max_dim",
            ));
        }
        if self.train_pairs == 0 || self.validation_pairs == 0 || self.test_pairs == 0 {
            return Err(TupiError::invalid("pair counts must be positive"));
        }
        Ok(())
    }
}

/// A generated task: the matrix the initial ranker trains on, the test-time
/// features, the clean targets, and disjoint pair splits.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub g: FeatureSet,
    pub features: Vec<FeatureSet>,
    pub f_star: Predictions,
    pub train: RankPairs,
    pub validation: RankPairs,
    pub test: RankPairs,
}

/// Smooth strictly increasing map of the latent coordinate; the derivative
/// stays positive so the clean ordering equals the latent ordering.
fn signal(u: f64) -> f64 {
    u + 0.15 * (2.0 * std::f64::consts::PI * u).sin()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let n = spec.n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let randn = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let latent: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let f_star = Array1::from_vec(latent.iter().map(|&u| signal(u)).collect());
    let scaled = scale01(&f_star)?;

    let mut g = Array2::<f64>::zeros((n, spec.d_base));
    for i in 0..n {
        g[[i, 0]] = scaled[i] + spec.noise_level * randn(&mut rng);
    }
    for j in 1..spec.d_base {
        for i in 0..n {
            g[[i, j]] = randn(&mut rng);
        }
    }

    let mut features = Vec::new();
    for (idx, &sigma) in spec.gt_feature_noise.iter().enumerate() {
        let values = Array2::from_shape_fn((n, 1), |(i, _)| scaled[i] + sigma * randn(&mut rng));
        features.push(FeatureSet::new(format!("gt{idx}_sigma{sigma}"), values)?);
    }
    for idx in 0..spec.distractors.count {
        let dim = rng.random_range(spec.distractors.min_dim..=spec.distractors.max_dim);
        let mut values = Array2::<f64>::zeros((n, dim));
        for i in 0..n {
            for j in 0..dim {
                values[[i, j]] = randn(&mut rng);
            }
        }
        features.push(FeatureSet::new(format!("distractor{idx}"), values)?);
    }

    let f_star = Predictions::new(f_star)?;
    let total = spec.train_pairs + spec.validation_pairs + spec.test_pairs;
    let all_pairs = pairs_from_scores(&f_star, total, spec.seed)?;
    let pairs = all_pairs.pairs();
    let train = RankPairs::new(pairs[..spec.train_pairs].to_vec(), n)?;
    let validation = RankPairs::new(
        pairs[spec.train_pairs..spec.train_pairs + spec.validation_pairs].to_vec(),
        n,
    )?;
    let test = RankPairs::new(pairs[spec.train_pairs + spec.validation_pairs..].to_vec(), n)?;

    Ok(SyntheticData {
        g: FeatureSet::new("G", g)?,
        features,
        f_star,
        train,
        validation,
        test,
    })
}

/// Hyperparameter grids; unset fields fall back to the defaults used in the
/// controlled studies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub tupi: Option<Vec<(f64, f64)>>,
    pub coconut: Option<Vec<f64>>,
    pub ssl: Option<Vec<f64>>,
}

fn log_grid() -> Vec<f64> {
    vec![1e-2, 1e-1, 1.0, 1e1, 1e2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputPaths {
    pub predictions: String,
    pub features: Vec<String>,
    pub validation_pairs: String,
    #[serde(default)]
    pub test_pairs: Option<String>,
}

fn default_rank_cfg() -> usize {
    50
}
fn default_max_iters_cfg() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub spec: Option<SyntheticSpec>,
    #[serde(default)]
    pub inputs: Option<InputPaths>,
    #[serde(default)]
    pub methods: Vec<String>,
    #[serde(default)]
    pub grids: GridConfig,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default = "default_rank_cfg")]
    pub rank: usize,
    #[serde(default = "default_max_iters_cfg")]
    pub max_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub test_accuracy: Option<f64>,
    pub validation_accuracy: f64,
    pub config_chosen: BTreeMap<String, f64>,
    pub iterations: usize,
    pub wall_time_ms: u64,
    pub predictions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub spec: Option<SyntheticSpec>,
    pub initial: MethodOutcome,
    pub methods: BTreeMap<String, MethodOutcome>,
}

const KNOWN_METHODS: [&str; 6] = [
    "tupi",
    "coconut",
    "ssl",
    "combined1",
    "combined2",
    "retrain-on-features",
];
const RANKER_REG: f64 = 1e-3;
const GRAPH_K: usize = 10;

fn outcome(
    predictions: &Predictions,
    validation: &RankPairs,
    test: Option<&RankPairs>,
    config_chosen: BTreeMap<String, f64>,
    iterations: usize,
    started: Instant,
) -> Result<MethodOutcome> {
    Ok(MethodOutcome {
        test_accuracy: test.map(|t| rank_accuracy(predictions, t)).transpose()?,
        validation_accuracy: rank_accuracy(predictions, validation)?,
        config_chosen,
        iterations,
        wall_time_ms: started.elapsed().as_millis() as u64,
        predictions: predictions.scores().to_vec(),
    })
}

fn concat_features(features: &[FeatureSet]) -> Result<FeatureSet> {
    if features.is_empty() {
        return Err(TupiError::invalid("need at least one feature set"));
    }
    let n = features[0].len();
    let total_dim: usize = features.iter().map(|f| f.dim()).sum();
    let mut values = Array2::<f64>::zeros((n, total_dim));
    let mut col = 0;
    for f in features {
        values
            .slice_mut(ndarray::s![.., col..col + f.dim()])
            .assign(f.values());
        col += f.dim();
    }
    FeatureSet::new("concat", values)
}

struct TunedCoconut {
    lambda_c: f64,
    predictions: Predictions,
}

fn tune_coconut(
    f_initial: &Predictions,
    graph: &NeighborGraph,
    k_c: usize,
    grid: &[f64],
    validation: &RankPairs,
) -> Result<TunedCoconut> {
    let mut best: Option<(f64, TunedCoconut)> = None;
    for &lambda_c in grid {
        let config = CoconutConfig { lambda_c, k_c };
        let predictions = coconut_refine(f_initial, graph, &config)?;
        let acc = rank_accuracy(&predictions, validation)?;
        if best.as_ref().map_or(true, |(b, _)| acc > *b) {
            best = Some((acc, TunedCoconut { lambda_c, predictions }));
        }
    }
    Ok(best.expect("nonempty grid").1)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    for m in &config.methods {
        if !KNOWN_METHODS.contains(&m.as_str()) {
            return Err(TupiError::invalid(format!(
                "unknown method '{m}' (expected one of {KNOWN_METHODS:?})"
            )));
        }
    }
    if config.rank < 2 {
        return Err(TupiError::invalid("rank must be at least 2"));
    }

    let (f_initial, mut features, validation, test, spec_echo, seed, fi_copies) =
        match (&config.spec, &config.inputs) {
            (Some(spec), None) => {
                let mut spec = spec.clone();
                if let Some(seed) = config.seed {
                    spec.seed = seed;
                }
                let data = generate_synthetic(&spec)?;
                let ranker = train_linear_ranker(&data.g, &data.train, RANKER_REG)?;
                let f_initial = ranker.score(&data.g)?;
                (
                    f_initial,
                    data.features,
                    data.validation,
                    Some(data.test),
                    Some(spec.clone()),
                    spec.seed,
                    spec.fi_copies,
                )
            }
            (None, Some(inputs)) => {
                let f_initial = ingest_predictions(&inputs.predictions)?;
                let n = f_initial.len();
                let mut features = Vec::new();
                for path in &inputs.features {
                    let f = ingest_features(path)?;
                    if f.len() != n {
                        return Err(TupiError::invalid(format!(
                            "feature file '{path}' has {} rows but predictions have {n}",
                            f.len()
                        )));
                    }
                    features.push(f);
                }
                let validation = ingest_pairs(&inputs.validation_pairs, n)?;
                let test = inputs
                    .test_pairs
                    .as_ref()
                    .map(|p| ingest_pairs(p, n))
                    .transpose()?;
                (
                    f_initial,
                    features,
                    validation,
                    test,
                    None,
                    config.seed.unwrap_or(0),
                    0,
                )
            }
            _ => {
                return Err(TupiError::invalid(
                    "config must provide exactly one of `spec` or `inputs`",
                ));
            }
        };

    for i in 0..fi_copies {
        features.push(FeatureSet::new(
            format!("fi_copy{i}"),
            f_initial.scores().view().insert_axis(Axis(1)).to_owned(),
        )?);
    }

    let initial = outcome(
        &f_initial,
        &validation,
        test.as_ref(),
        BTreeMap::new(),
        0,
        Instant::now(),
    )?;

    let base = DenoiseConfig {
        rank: config.rank,
        max_iters: config.max_iters,
        ..DenoiseConfig::default()
    };
    let n = f_initial.len();
    let k_c = GRAPH_K.min(n - 1);
    let tupi_grid = config.grids.tupi.clone().unwrap_or_else(default_grid);
    let coconut_grid = config.grids.coconut.clone().unwrap_or_else(log_grid);
    let ssl_grid = config.grids.ssl.clone().unwrap_or_else(log_grid);

    // lazily shared across methods that reuse each other's tuning
    let mut tuned_tupi: Option<(DenoiseConfig, Predictions, usize)> = None;
    let mut tuned_coconut: Option<TunedCoconut> = None;
    let mut graph_cache: Option<NeighborGraph> = None;

    let mut methods = BTreeMap::new();
    for method in &config.methods {
        if methods.contains_key(method.as_str()) {
            continue; // duplicate entries collapse to one run
        }
        let started = Instant::now();
        let entry = match method.as_str() {
            "tupi" => {
                let (cfg, preds, iters) = tuned_tupi_entry(
                    &mut tuned_tupi,
                    &f_initial,
                    &features,
                    &validation,
                    &tupi_grid,
                    &base,
                )?;
                let mut chosen = BTreeMap::new();
                chosen.insert("lambda".into(), cfg.lambda);
                chosen.insert("sigma_w_sq".into(), cfg.sigma_w_sq);
                outcome(&preds, &validation, test.as_ref(), chosen, iters, started)?
            }
            "coconut" => {
                let graph = graph_entry(&mut graph_cache, &features)?;
                let tuned = coconut_entry(
                    &mut tuned_coconut,
                    &f_initial,
                    &graph,
                    k_c,
                    &coconut_grid,
                    &validation,
                )?;
                let mut chosen = BTreeMap::new();
                chosen.insert("lambda_c".into(), tuned.lambda_c);
                chosen.insert("k_c".into(), k_c as f64);
                outcome(&tuned.predictions, &validation, test.as_ref(), chosen, 0, started)?
            }
            "ssl" => {
                let concat = concat_features(&features)?;
                let graph_k = GRAPH_K.min(n - 1);
                let mut best: Option<(f64, f64, Predictions)> = None;
                for &lambda_ssl in &ssl_grid {
                    let preds = ssl_laplacian_rank(&concat, &validation, graph_k, lambda_ssl)?;
                    let acc = rank_accuracy(&preds, &validation)?;
                    if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
                        best = Some((acc, lambda_ssl, preds));
                    }
                }
                let (_, lambda_ssl, preds) = best.expect("nonempty grid");
                let mut chosen = BTreeMap::new();
                chosen.insert("lambda_ssl".into(), lambda_ssl);
                chosen.insert("graph_k".into(), graph_k as f64);
                outcome(&preds, &validation, test.as_ref(), chosen, 0, started)?
            }
            "combined1" => {
                let (tupi_cfg, _, _) = tuned_tupi_entry(
                    &mut tuned_tupi,
                    &f_initial,
                    &features,
                    &validation,
                    &tupi_grid,
                    &base,
                )?;
                let graph = graph_entry(&mut graph_cache, &features)?;
                let tuned = coconut_entry(
                    &mut tuned_coconut,
                    &f_initial,
                    &graph,
                    k_c,
                    &coconut_grid,
                    &validation,
                )?;
                let coconut_cfg = CoconutConfig {
                    lambda_c: tuned.lambda_c,
                    k_c,
                };
                let preds = combined_refine(
                    &f_initial,
                    &features,
                    &tupi_cfg,
                    &graph,
                    &coconut_cfg,
                    &validation,
                )?;
                let mut chosen = BTreeMap::new();
                chosen.insert("lambda".into(), tupi_cfg.lambda);
                chosen.insert("sigma_w_sq".into(), tupi_cfg.sigma_w_sq);
                chosen.insert("lambda_c".into(), coconut_cfg.lambda_c);
                chosen.insert("k_c".into(), k_c as f64);
                outcome(&preds, &validation, test.as_ref(), chosen, 0, started)?
            }
            "combined2" => {
                let (_, tupi_preds, _) = tuned_tupi_entry(
                    &mut tuned_tupi,
                    &f_initial,
                    &features,
                    &validation,
                    &tupi_grid,
                    &base,
                )?;
                let graph = graph_entry(&mut graph_cache, &features)?;
                let tuned = coconut_entry(
                    &mut tuned_coconut,
                    &f_initial,
                    &graph,
                    k_c,
                    &coconut_grid,
                    &validation,
                )?;
                let (name, preds) = select_by_validation(
                    &[
                        ("tupi".into(), tupi_preds),
                        ("coconut".into(), tuned.predictions.clone()),
                    ],
                    &validation,
                )?;
                let mut chosen = BTreeMap::new();
                chosen.insert("selected_tupi".into(), if name == "tupi" { 1.0 } else { 0.0 });
                outcome(&preds, &validation, test.as_ref(), chosen, 0, started)?
            }
            "retrain-on-features" => {
                let concat = concat_features(&features)?;
                let ranker = train_linear_ranker(&concat, &validation, RANKER_REG)?;
                let preds = ranker.score(&concat)?;
                outcome(&preds, &validation, test.as_ref(), BTreeMap::new(), 0, started)?
            }
            _ => unreachable!("validated above"),
        };
        methods.insert(method.clone(), entry);
    }

    let report = ExperimentReport {
        seed,
        spec: spec_echo,
        initial,
        methods,
    };
    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_with_path(dir, e))?;
        let path = Path::new(dir).join("report.json");
        let body = serde_json::to_string_pretty(&report)
            .map_err(|e| TupiError::NumericalFailure(format!("report serialization: {e}")))?;
        std::fs::write(&path, body).map_err(|e| io_with_path(&path.to_string_lossy(), e))?;
    }
    Ok(report)
}

fn tuned_tupi_entry(
    cache: &mut Option<(DenoiseConfig, Predictions, usize)>,
    f_initial: &Predictions,
    features: &[FeatureSet],
    validation: &RankPairs,
    grid: &[(f64, f64)],
    base: &DenoiseConfig,
) -> Result<(DenoiseConfig, Predictions, usize)> {
    if cache.is_none() {
        let (cfg, report) = tune(f_initial, features, validation, grid, base)?;
        *cache = Some((cfg, report.final_predictions, report.iterations_run));
    }
    Ok(cache.clone().expect("just filled"))
}

fn graph_entry(cache: &mut Option<NeighborGraph>, features: &[FeatureSet]) -> Result<NeighborGraph> {
    if cache.is_none() {
        let concat = concat_features(features)?;
        *cache = Some(knn_laplacian(&concat, GRAPH_K.min(concat.len() - 1))?);
    }
    Ok(cache.clone().expect("just filled"))
}

fn coconut_entry<'a>(
    cache: &'a mut Option<TunedCoconut>,
    f_initial: &Predictions,
    graph: &NeighborGraph,
    k_c: usize,
    grid: &[f64],
    validation: &RankPairs,
) -> Result<&'a TunedCoconut> {
    if cache.is_none() {
        *cache = Some(tune_coconut(f_initial, graph, k_c, grid, validation)?);
    }
    Ok(cache.as_ref().expect("just filled"))
}

fn io_with_path(path: &str, e: std::io::Error) -> TupiError {
    TupiError::Io(std::io::Error::new(e.kind(), format!("{path}: {e}")))
}

fn read_lines(path: &str) -> Result<Vec<(usize, String)>> {
    let body = std::fs::read_to_string(path).map_err(|e| io_with_path(path, e))?;
    Ok(body
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn parse_row(path: &str, line_no: usize, line: &str) -> Result<Vec<f64>> {
    let mut row = Vec::new();
    for field in line.split(',') {
        let value: f64 = field.trim().parse().map_err(|_| {
            TupiError::parse(
                format!("{path}:{line_no}"),
                format!("'{}' is not a number", field.trim()),
            )
        })?;
        if !value.is_finite() {
            return Err(TupiError::parse(
                format!("{path}:{line_no}"),
                format!("non-finite value '{}'", field.trim()),
            ));
        }
        row.push(value);
    }
    Ok(row)
}

fn is_numeric_line(line: &str) -> bool {
    line.split(',').all(|f| f.trim().parse::<f64>().is_ok())
}

fn parse_table(path: &str) -> Result<Vec<Vec<f64>>> {
    let lines = read_lines(path)?;
    if lines.is_empty() {
        return Err(TupiError::parse(path, "file has no data rows"));
    }
    // a single leading header line is tolerated when it is not numeric
    let start = if is_numeric_line(&lines[0].1) { 0 } else { 1 };
    if start == lines.len() {
        return Err(TupiError::parse(path, "file has a header but no data rows"));
    }
    let mut rows = Vec::with_capacity(lines.len() - start);
    let mut width = None;
    for (line_no, line) in &lines[start..] {
        let row = parse_row(path, *line_no, line)?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(TupiError::parse(
                    format!("{path}:{line_no}"),
                    format!("expected {w} columns, found {}", row.len()),
                ));
            }
            _ => {}
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn ingest_features(path: &str) -> Result<FeatureSet> {
    let rows = parse_table(path)?;
    let n = rows.len();
    let d = rows[0].len();
    let mut values = Array2::<f64>::zeros((n, d));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            values[[i, j]] = v;
        }
    }
    let name = Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string());
    FeatureSet::new(name, values)
}

pub fn ingest_predictions(path: &str) -> Result<Predictions> {
    let rows = parse_table(path)?;
    if rows[0].len() != 1 {
        return Err(TupiError::parse(
            path,
            format!("predictions must be a single column, found {}", rows[0].len()),
        ));
    }
    Predictions::from_vec(rows.into_iter().map(|r| r[0]).collect())
}

pub fn ingest_pairs(path: &str, n: usize) -> Result<RankPairs> {
    let lines = read_lines(path)?;
    if lines.is_empty() {
        return Err(TupiError::parse(path, "file has no data rows"));
    }
    let start = if lines[0].1.split(',').all(|f| f.trim().parse::<usize>().is_ok()) {
        0
    } else {
        1
    };
    let mut pairs = Vec::with_capacity(lines.len() - start);
    for (line_no, line) in &lines[start..] {
        let fields: Vec<&str> = line.split(',').map(|f| f.trim()).collect();
        if fields.len() != 2 {
            return Err(TupiError::parse(
                format!("{path}:{line_no}"),
                format!("expected 'q,r', found {} fields", fields.len()),
            ));
        }
        let q: usize = fields[0].parse().map_err(|_| {
            TupiError::parse(
                format!("{path}:{line_no}"),
                format!("'{}' is not an index", fields[0]),
            )
        })?;
        let r: usize = fields[1].parse().map_err(|_| {
            TupiError::parse(
                format!("{path}:{line_no}"),
                format!("'{}' is not an index", fields[1]),
            )
        })?;
        if q >= n || r >= n {
            return Err(TupiError::parse(
                format!("{path}:{line_no}"),
                format!("pair ({q}, {r}) out of range for {n} instances"),
            ));
        }
        pairs.push((q, r));
    }
    RankPairs::new(pairs, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_small() -> SyntheticSpec {
        SyntheticSpec {
            n: 40,
            train_pairs: 60,
            validation_pairs: 25,
            test_pairs: 200,
            gt_feature_noise: vec![0.0],
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn sigma_zero_feature_preserves_ordering() {
        let data = generate_synthetic(&spec_small()).unwrap();
        let feature = &data.features[0];
        let f = data.f_star.scores();
        let h = feature.values();
        for i in 0..f.len() {
            for j in 0..f.len() {
                if f[i] < f[j] {
                    assert!(h[[i, 0]] < h[[j, 0]], "ordering broken at ({i}, {j})");
                }
            }
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(&spec_small()).unwrap();
        let b = generate_synthetic(&spec_small()).unwrap();
        assert_eq!(a.f_star.scores(), b.f_star.scores());
        assert_eq!(a.g.values(), b.g.values());
        assert_eq!(a.features[0].values(), b.features[0].values());
        assert_eq!(a.train.pairs(), b.train.pairs());
        assert_eq!(a.test.pairs(), b.test.pairs());
    }

    #[test]
    fn pair_splits_are_disjoint() {
        let data = generate_synthetic(&spec_small()).unwrap();
        let mut seen = std::collections::HashSet::new();
        for &p in data
            .train
            .pairs()
            .iter()
            .chain(data.validation.pairs())
            .chain(data.test.pairs())
        {
            assert!(seen.insert(p), "duplicate pair {p:?} across splits");
        }
        assert_eq!(data.train.len(), 60);
        assert_eq!(data.validation.len(), 25);
        assert_eq!(data.test.len(), 200);
    }

    #[test]
    fn unit_noise_feature_psnr_near_zero_db() {
        let mut psnrs = Vec::new();
        for seed in 0..10u64 {
            let spec = SyntheticSpec {
                gt_feature_noise: vec![1.0],
                seed,
                ..SyntheticSpec::default()
            };
            let data = generate_synthetic(&spec).unwrap();
            let clean = scale01(data.f_star.scores()).unwrap();
            let noisy = data.features[0].values();
            let mse: f64 = (0..spec.n)
                .map(|i| (noisy[[i, 0]] - clean[i]).powi(2))
                .sum::<f64>()
                / spec.n as f64;
            psnrs.push(10.0 * (1.0 / mse).log10());
        }
        let mean = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
        assert!(
            (mean - (-0.13)).abs() < 1.0,
            "mean PSNR {mean} outside -0.13 +/- 1 dB"
        );
    }

    #[test]
    fn initial_ranker_lands_in_band_across_seeds() {
        for seed in 0..10u64 {
            let config = ExperimentConfig {
                seed: Some(seed),
                spec: Some(SyntheticSpec::default()),
                inputs: None,
                methods: vec![],
                grids: GridConfig::default(),
                output_dir: None,
                rank: 50,
                max_iters: 50,
            };
            let report = run_experiment(&config).unwrap();
            let acc = report.initial.test_accuracy.unwrap();
            assert!(
                (0.70..=0.85).contains(&acc),
                "seed {seed}: initial accuracy {acc} outside 70-85%"
            );
        }
    }

    #[test]
    fn empty_methods_report_only_initial() {
        let config = ExperimentConfig {
            seed: None,
            spec: Some(spec_small()),
            inputs: None,
            methods: vec![],
            grids: GridConfig::default(),
            output_dir: None,
            rank: 8,
            max_iters: 5,
        };
        let report = run_experiment(&config).unwrap();
        assert!(report.methods.is_empty());
        // stored predictions reproduce the reported accuracies
        let preds = Predictions::from_vec(report.initial.predictions.clone()).unwrap();
        let data = generate_synthetic(&spec_small()).unwrap();
        let acc = rank_accuracy(&preds, &data.test).unwrap();
        assert_eq!(Some(acc), report.initial.test_accuracy);
    }

    #[test]
    fn pure_distractors_with_tiny_lambda_do_not_degrade() {
        let spec = SyntheticSpec {
            n: 60,
            train_pairs: 80,
            validation_pairs: 30,
            test_pairs: 300,
            gt_feature_noise: vec![],
            distractors: DistractorSpec {
                count: 2,
                min_dim: 2,
                max_dim: 5,
            },
            ..SyntheticSpec::default()
        };
        let config = ExperimentConfig {
            seed: Some(3),
            spec: Some(spec),
            inputs: None,
            methods: vec!["tupi".into()],
            grids: GridConfig {
                tupi: Some(vec![(0.01, 1.0)]),
                ..GridConfig::default()
            },
            output_dir: None,
            rank: 16,
            max_iters: 10,
        };
        let report = run_experiment(&config).unwrap();
        let tupi = &report.methods["tupi"];
        let initial = report.initial.test_accuracy.unwrap();
        assert!(
            tupi.test_accuracy.unwrap() >= initial - 0.01,
            "tupi {:?} fell more than a point below initial {initial}",
            tupi.test_accuracy
        );
    }

    #[test]
    fn reports_identical_modulo_wall_time() {
        let config = ExperimentConfig {
            seed: Some(11),
            spec: Some(spec_small()),
            inputs: None,
            methods: vec!["tupi".into(), "coconut".into()],
            grids: GridConfig {
                tupi: Some(vec![(1.0, 1.0)]),
                coconut: Some(vec![0.1, 10.0]),
                ..GridConfig::default()
            },
            output_dir: None,
            rank: 8,
            max_iters: 5,
        };
        let mut a = run_experiment(&config).unwrap();
        let mut b = run_experiment(&config).unwrap();
        a.initial.wall_time_ms = 0;
        b.initial.wall_time_ms = 0;
        for m in a.methods.values_mut() {
            m.wall_time_ms = 0;
        }
        for m in b.methods.values_mut() {
            m.wall_time_ms = 0;
        }
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn seed_override_wins_over_spec_seed() {
        let mut spec = spec_small();
        spec.seed = 0;
        let base = ExperimentConfig {
            seed: Some(7),
            spec: Some(spec.clone()),
            inputs: None,
            methods: vec![],
            grids: GridConfig::default(),
            output_dir: None,
            rank: 8,
            max_iters: 5,
        };
        let overridden = run_experiment(&base).unwrap();
        spec.seed = 7;
        let direct = run_experiment(&ExperimentConfig {
            seed: None,
            spec: Some(spec),
            ..base
        })
        .unwrap();
        assert_eq!(overridden.seed, 7);
        assert_eq!(overridden.initial.predictions, direct.initial.predictions);
    }

    fn write_temp(name: &str, body: &str) -> String {
        let path = std::env::temp_dir().join(format!("tupi_test_{}_{name}", std::process::id()));
        std::fs::write(&path, body).unwrap();
        path.to_string_lossy().into_owned()
    }

    #[test]
    fn ingest_plain_and_headered_csv() {
        let plain = write_temp("plain.csv", "1.0,2.0\n3.0,4.0\n5.5,6.5\n");
        let f = ingest_features(&plain).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f.dim(), 2);
        assert_eq!(f.values()[[2, 1]], 6.5);

        let headered = write_temp("headered.csv", "a,b\n1.0,2.0\n3.0,4.0\n");
        let f = ingest_features(&headered).unwrap();
        assert_eq!(f.len(), 2);
    }

    #[test]
    fn ingest_rejects_nan_ragged_and_missing() {
        let nan = write_temp("nan.csv", "1.0,2.0\nNaN,4.0\n");
        match ingest_features(&nan) {
            Err(TupiError::ParseError { location, .. }) => {
                assert!(location.ends_with(":2"), "location {location}");
            }
            other => panic!("expected ParseError, got {other:?}"),
        }

        let ragged = write_temp("ragged.csv", "1.0,2.0\n3.0\n");
        assert!(matches!(
            ingest_features(&ragged),
            Err(TupiError::ParseError { .. })
        ));

        assert!(matches!(
            ingest_features("/nonexistent/nowhere.csv"),
            Err(TupiError::Io(_))
        ));
    }

    #[test]
    fn ingest_predictions_and_pairs() {
        let preds = write_temp("preds.csv", "0.5\n1.5\n-0.5\n");
        let p = ingest_predictions(&preds).unwrap();
        assert_eq!(p.len(), 3);

        let wide = write_temp("wide.csv", "1.0,2.0\n");
        assert!(matches!(
            ingest_predictions(&wide),
            Err(TupiError::ParseError { .. })
        ));

        let pairs = write_temp("pairs.csv", "q,r\n0,1\n2,1\n");
        let rp = ingest_pairs(&pairs, 3).unwrap();
        assert_eq!(rp.pairs(), &[(0, 1), (2, 1)]);

        let out_of_range = write_temp("oor.csv", "0,5\n");
        match ingest_pairs(&out_of_range, 3) {
            Err(TupiError::ParseError { location, .. }) => {
                assert!(location.ends_with(":1"));
            }
            other => panic!("expected ParseError, got {other:?}"),
        }
    }
}
