//! Command-line front end: dataset synthesis, one-shot denoising, grid
//! tuning, baselines, config-driven experiments, and report pretty-printing.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

use tupi::denoiser::{default_grid, run, tune, DenoiseConfig};
use tupi::error::{Result, TupiError};
use tupi::experiments::{
    generate_synthetic, ingest_features, ingest_pairs, ingest_predictions, run_experiment,
    ExperimentConfig, ExperimentReport, InputPaths, MethodOutcome, SyntheticSpec,
};
use tupi::ranking::{rank_accuracy, RankPairs};
use tupi::types::{FeatureSet, Predictions};

#[derive(Parser)]
#[command(
    name = "tupi",
    about = "Refine a fixed ranker's predictions at test time using auxiliary features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineMethod {
    Coconut,
    Ssl,
    Combined1,
    Combined2,
}

impl BaselineMethod {
    fn name(self) -> &'static str {
        match self {
            BaselineMethod::Coconut => "coconut",
            BaselineMethod::Ssl => "ssl",
            BaselineMethod::Combined1 => "combined1",
            BaselineMethod::Combined2 => "combined2",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ranking task and write it to a directory as CSVs
    Synth {
        /// JSON file with generator parameters; defaults apply when omitted
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Override the generator seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine predictions once with a fixed (lambda, sigma_w_sq)
    Denoise {
        #[arg(long)]
        predictions: PathBuf,
        /// Feature CSV, repeatable
        #[arg(long = "features", required = true)]
        features: Vec<PathBuf>,
        #[arg(long)]
        validation: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma_w_sq: f64,
        #[arg(long, default_value_t = 50)]
        rank: usize,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
        /// Where to write the refined predictions CSV
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid-search (lambda, sigma_w_sq) on validation pairs and report the winner
    Tune {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long = "features", required = true)]
        features: Vec<PathBuf>,
        #[arg(long)]
        validation: PathBuf,
        #[arg(long, default_value_t = 50)]
        rank: usize,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one comparison method on ingested data
    Baseline {
        #[arg(long, value_enum)]
        method: BaselineMethod,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long = "features", required = true)]
        features: Vec<PathBuf>,
        #[arg(long)]
        validation: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        rank: usize,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full config-driven run: synthesize or ingest, run methods, emit a report
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the report output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretty-print a report written by `experiment`
    Report {
        #[arg(long)]
        path: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &TupiError) -> i32 {
    match e {
        TupiError::InvalidInput(_) | TupiError::ParseError { .. } | TupiError::Io(_) => 2,
        _ => 3,
    }
}

fn io_err(path: &Path, e: std::io::Error) -> TupiError {
    TupiError::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

fn write_column_csv(path: &Path, values: &[f64]) -> Result<()> {
    let body: String = values.iter().map(|v| format!("{v}\n")).collect();
    std::fs::write(path, body).map_err(|e| io_err(path, e))
}

fn write_matrix_csv(path: &Path, values: &ndarray::Array2<f64>) -> Result<()> {
    let mut body = String::new();
    for row in values.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        body.push_str(&line.join(","));
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| io_err(path, e))
}

fn write_pairs_csv(path: &Path, pairs: &RankPairs) -> Result<()> {
    let body: String = pairs
        .pairs()
        .iter()
        .map(|(q, r)| format!("{q},{r}\n"))
        .collect();
    std::fs::write(path, body).map_err(|e| io_err(path, e))
}

fn load_spec(path: Option<&Path>) -> Result<SyntheticSpec> {
    match path {
        None => Ok(SyntheticSpec::default()),
        Some(p) => {
            let body = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&body)
                .map_err(|e| TupiError::parse(p.display().to_string(), e.to_string()))
        }
    }
}

fn ingest_inputs(
    predictions: &Path,
    features: &[PathBuf],
    validation: &Path,
) -> Result<(Predictions, Vec<FeatureSet>, RankPairs)> {
    let f = ingest_predictions(&predictions.display().to_string())?;
    let mut sets = Vec::new();
    for path in features {
        let set = ingest_features(&path.display().to_string())?;
        if set.len() != f.len() {
            return Err(TupiError::invalid(format!(
                "feature file '{}' has {} rows but predictions have {}",
                path.display(),
                set.len(),
                f.len()
            )));
        }
        sets.push(set);
    }
    let pairs = ingest_pairs(&validation.display().to_string(), f.len())?;
    Ok((f, sets, pairs))
}

fn print_outcome(name: &str, o: &MethodOutcome) {
    let test = o
        .test_accuracy
        .map(|a| format!("{a:.4}"))
        .unwrap_or_else(|| "-".into());
    let cfg: Vec<String> = o
        .config_chosen
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    println!(
        "{name:<22} validation {:.4}  test {test}  {}",
        o.validation_accuracy,
        cfg.join(" ")
    );
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth { spec, seed, out } => {
            let mut spec = load_spec(spec.as_deref())?;
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let data = generate_synthetic(&spec)?;
            std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            write_matrix_csv(&out.join("g.csv"), data.g.values())?;
            write_column_csv(&out.join("f_star.csv"), data.f_star.scores().as_slice().unwrap())?;
            for feature in &data.features {
                write_matrix_csv(
                    &out.join(format!("{}.csv", feature.name())),
                    feature.values(),
                )?;
            }
            write_pairs_csv(&out.join("train_pairs.csv"), &data.train)?;
            write_pairs_csv(&out.join("validation_pairs.csv"), &data.validation)?;
            write_pairs_csv(&out.join("test_pairs.csv"), &data.test)?;
            println!(
                "wrote n={} task with {} feature sets to {}",
                spec.n,
                data.features.len(),
                out.display()
            );
            Ok(())
        }
        Command::Denoise {
            predictions,
            features,
            validation,
            lambda,
            sigma_w_sq,
            rank,
            max_iters,
            out,
        } => {
            let (f, sets, pairs) = ingest_inputs(&predictions, &features, &validation)?;
            let config = DenoiseConfig {
                lambda,
                sigma_w_sq,
                rank,
                max_iters,
                ..DenoiseConfig::default()
            };
            let report = run(&f, &sets, &config, &pairs)?;
            let before = rank_accuracy(&f, &pairs)?;
            let after = rank_accuracy(&report.final_predictions, &pairs)?;
            println!(
                "validation accuracy {before:.4} -> {after:.4} in {} iterations",
                report.iterations_run
            );
            if let Some(out) = out {
                write_column_csv(&out, report.final_predictions.scores().as_slice().unwrap())?;
            }
            Ok(())
        }
        Command::Tune {
            predictions,
            features,
            validation,
            rank,
            max_iters,
            out,
        } => {
            let (f, sets, pairs) = ingest_inputs(&predictions, &features, &validation)?;
            let base = DenoiseConfig {
                rank,
                max_iters,
                ..DenoiseConfig::default()
            };
            let (config, report) = tune(&f, &sets, &pairs, &default_grid(), &base)?;
            let after = rank_accuracy(&report.final_predictions, &pairs)?;
            println!(
                "lambda {} sigma_w_sq {} (validation accuracy {after:.4})",
                config.lambda, config.sigma_w_sq
            );
            if let Some(out) = out {
                write_column_csv(&out, report.final_predictions.scores().as_slice().unwrap())?;
            }
            Ok(())
        }
        Command::Baseline {
            method,
            predictions,
            features,
            validation,
            test,
            rank,
            max_iters,
            out,
        } => {
            let config = ExperimentConfig {
                seed: None,
                spec: None,
                inputs: Some(InputPaths {
                    predictions: predictions.display().to_string(),
                    features: features.iter().map(|p| p.display().to_string()).collect(),
                    validation_pairs: validation.display().to_string(),
                    test_pairs: test.map(|p| p.display().to_string()),
                }),
                methods: vec![method.name().to_string()],
                grids: Default::default(),
                output_dir: None,
                rank,
                max_iters,
            };
            let report = run_experiment(&config)?;
            print_outcome("initial", &report.initial);
            let outcome = &report.methods[method.name()];
            print_outcome(method.name(), outcome);
            if let Some(out) = out {
                write_column_csv(&out, &outcome.predictions)?;
            }
            Ok(())
        }
        Command::Experiment { config, seed, out } => {
            let body = std::fs::read_to_string(&config).map_err(|e| io_err(&config, e))?;
            let mut parsed: ExperimentConfig = serde_json::from_str(&body)
                .map_err(|e| TupiError::parse(config.display().to_string(), e.to_string()))?;
            if seed.is_some() {
                parsed.seed = seed;
            }
            if let Some(out) = out {
                parsed.output_dir = Some(out.display().to_string());
            }
            let report = run_experiment(&parsed)?;
            println!("seed {}", report.seed);
            print_outcome("initial", &report.initial);
            for (name, outcome) in &report.methods {
                print_outcome(name, outcome);
            }
            if let Some(dir) = &parsed.output_dir {
                println!("report written to {}/report.json", dir);
            }
            Ok(())
        }
        Command::Report { path } => {
            let body = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let report: ExperimentReport = serde_json::from_str(&body)
                .map_err(|e| TupiError::parse(path.display().to_string(), e.to_string()))?;
            println!("seed {}", report.seed);
            if let Some(spec) = &report.spec {
                println!(
                    "synthetic task: n={} noise {} gt features {:?} distractors {} fi copies {}",
                    spec.n,
                    spec.noise_level,
                    spec.gt_feature_noise,
                    spec.distractors.count,
                    spec.fi_copies
                );
            }
            print_outcome("initial", &report.initial);
            for (name, outcome) in &report.methods {
                print_outcome(name, outcome);
            }
            Ok(())
        }
    }
}
