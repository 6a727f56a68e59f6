//! Batch command line front end.
//!
//! * `fusereg fit --config run.toml data.csv [more.csv ...]` — estimate on
//!   one file, or on several multiply imputed replicates (optionally pooled
//!   with `--pool`).
//! * `fusereg simulate --config sim.toml` — run the scenario grid and write
//!   the metric CSV, boxplot CSVs, and JSON report.
//! * `fusereg pool results/*.json` — Rubin-pool previously written result
//!   documents.
//!
//! Exit codes: 1 input/config error, 2 fit failure, 3 inference failure.
//! `FUSEREG_THREADS` caps the worker count (1 forces sequential runs).

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fusereg::data_model::{load_fused_csv, validate, DEFAULT_DELTA};
use fusereg::error::Error;
use fusereg::inference::{
    bootstrap_covariance, rubin_pool_values, wald_ci, PooledDocument, ResultDocument,
};
use fusereg::simharness::{
    export_boxplot_data, export_metrics_csv, run_scenario, DgpParams, ScenarioConfig,
    SimulationReport,
};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "fusereg",
    about = "Outcome regression from fused two-source data: IPW, imputation-based, and doubly robust estimators",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: current directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the configured estimators on one or more CSV files.
    Fit {
        #[command(flatten)]
        common: CommonArgs,
        /// Input CSV files; several files are treated as multiply imputed
        /// replicates of one sample.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Pool the per-replicate results by Rubin's rule.
        #[arg(long)]
        pool: bool,
    },
    /// Run the Monte Carlo scenario study.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Pool result documents from multiply imputed replicates.
    Pool {
        #[command(flatten)]
        common: CommonArgs,
        /// Result documents written by `fit`.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

/// Error classification for exit codes.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io { .. }
        | Error::Csv(_)
        | Error::MissingColumn(_)
        | Error::MalformedCell { .. }
        | Error::PatternViolation { .. }
        | Error::EmptySource(_)
        | Error::Validation(_)
        | Error::LayoutMismatch(_)
        | Error::DimensionMismatch(_) => 1,
        Error::RankDeficient(_)
        | Error::Separation(_)
        | Error::NoConvergence { .. }
        | Error::SingularJacobian(_)
        | Error::QuadratureUnsupported(_)
        | Error::DegenerateVariance(_)
        | Error::IllConditionedGram(_) => 2,
        Error::SingularBread(_) | Error::TooManyFailures { .. } => 3,
    }
}

fn main() -> ExitCode {
    fusereg::exec::init_threads_from_env();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit {
            common,
            files,
            pool,
        } => cmd_fit(&common, &files, pool),
        Command::Simulate { common } => cmd_simulate(&common),
        Command::Pool { common, files } => cmd_pool(&common, &files),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, Error> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Validation("--config is required for this command".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    Ok(cfg)
}

fn out_dir(common: &CommonArgs, cfg: &RunConfig) -> Result<PathBuf, Error> {
    let dir = common
        .out
        .clone()
        .or_else(|| {
            cfg.output
                .as_ref()
                .and_then(|o| o.dir.as_ref().map(PathBuf::from))
        })
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    Ok(dir)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("serialize: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".to_string())
}

fn cmd_fit(common: &CommonArgs, files: &[PathBuf], pool_flag: bool) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let schema = cfg.schema()?;
    let specs = cfg.analysis_specs()?;
    let dir = out_dir(common, &cfg)?;
    let bootstrap = cfg.inference.as_ref().map_or(0, |i| i.bootstrap);
    let pool = pool_flag || cfg.inference.as_ref().is_some_and(|i| i.pool);
    let seed = cfg.seed.unwrap_or(0);

    // load and validate every input before fitting anything
    let datasets = files
        .iter()
        .map(|path| {
            let ds = load_fused_csv(path, &schema)?;
            let report = validate(&ds, DEFAULT_DELTA, None)?;
            for warning in &report.warnings {
                eprintln!("{}: {warning}", path.display());
            }
            Ok(ds)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    if datasets.len() > 1 {
        fusereg::data_model::ReplicateSet::new(datasets.clone())?;
    }

    for spec in &specs {
        let mut estimates: Vec<Vec<f64>> = Vec::new();
        let mut variances: Vec<Vec<f64>> = Vec::new();
        let mut names: Vec<String> = Vec::new();
        for (ds, path) in datasets.iter().zip(files) {
            let mut result = fusereg::inference::run_analysis(ds, spec)?;
            if bootstrap > 0 {
                let cov = bootstrap_covariance(ds, spec, bootstrap, seed)?;
                result.fit.wald = Some(wald_ci(
                    &result.fit.theta,
                    &cov.per_sample,
                    spec.ci_level,
                )?);
                result.fit.covariance = Some(cov);
            }
            let doc = ResultDocument::from_fit(ds, &result.fit, spec.ci_level)?;
            let file = dir.join(format!("{}_{}.json", stem(path), spec.kind.label()));
            write_json(&file, &doc)?;
            println!("wrote {}", file.display());

            names = result.fit.names.clone();
            estimates.push(result.fit.theta.iter().copied().collect());
            let cov = result.fit.covariance.as_ref().expect("covariance attached");
            variances.push(
                (0..result.fit.theta.len())
                    .map(|j| cov.per_sample[(j, j)])
                    .collect(),
            );
        }
        if pool && datasets.len() > 1 {
            let pooled = rubin_pool_values(&names, &estimates, &variances, spec.ci_level)?;
            let doc = PooledDocument::from_pooled(spec.kind.label(), &pooled);
            let file = dir.join(format!("pooled_{}.json", spec.kind.label()));
            write_json(&file, &doc)?;
            println!("wrote {}", file.display());
        }
    }
    Ok(())
}

fn cmd_simulate(common: &CommonArgs) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let sim = cfg
        .simulate
        .clone()
        .ok_or_else(|| Error::Validation("config needs a [simulate] section".into()))?;
    let scenarios = cfg.scenarios()?;
    let dir = out_dir(common, &cfg)?;
    let seed = cfg.seed.unwrap_or(0);

    let mut reports: Vec<SimulationReport> = Vec::new();
    for &scenario in &scenarios {
        for &n in &sim.n {
            for &alpha3 in &sim.alpha3 {
                let mut run = ScenarioConfig::new(scenario, n, sim.reps, seed);
                run.params = DgpParams::reference().with_alpha3(alpha3);
                if let Some(form) = sim.propensity_form {
                    run.params.propensity_form = form;
                }
                run.estimators = sim.estimators.clone();
                run.ci_level = sim.ci_level;
                let report = run_scenario(&run)?;
                let tag = format!("{}_n{}_a{}", scenario, n, alpha3);
                let box_path = dir.join(format!("boxplot_{tag}.csv"));
                export_boxplot_data(&report, &box_path)?;
                println!("wrote {}", box_path.display());
                reports.push(report);
            }
        }
    }
    let metrics_path = dir.join("metrics.csv");
    export_metrics_csv(&reports, &metrics_path)?;
    println!("wrote {}", metrics_path.display());
    let report_path = dir.join("report.json");
    write_json(&report_path, &reports)?;
    println!("wrote {}", report_path.display());
    Ok(())
}

fn cmd_pool(common: &CommonArgs, files: &[PathBuf]) -> Result<(), Error> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    let docs = files
        .iter()
        .map(|path| {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            serde_json::from_str::<ResultDocument>(&text)
                .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
        })
        .collect::<Result<Vec<_>, Error>>()?;

    let first = &docs[0];
    let names: Vec<String> = first.coefficients.iter().map(|c| c.name.clone()).collect();
    let level = first.diagnostics.ci_level;
    let estimator = first.estimator.clone();
    for (i, doc) in docs.iter().enumerate() {
        let doc_names: Vec<String> = doc.coefficients.iter().map(|c| c.name.clone()).collect();
        if doc_names != names || doc.estimator != estimator {
            return Err(Error::LayoutMismatch(format!(
                "document {} does not match the first document's layout",
                files[i].display()
            )));
        }
    }
    let estimates: Vec<Vec<f64>> = docs
        .iter()
        .map(|d| d.coefficients.iter().map(|c| c.estimate).collect())
        .collect();
    let variances: Vec<Vec<f64>> = docs
        .iter()
        .map(|d| {
            d.coefficients
                .iter()
                .map(|c| c.std_error * c.std_error)
                .collect()
        })
        .collect();
    let pooled = rubin_pool_values(&names, &estimates, &variances, level)?;
    let doc = PooledDocument::from_pooled(&estimator, &pooled);
    let file = dir.join("pooled.json");
    write_json(&file, &doc)?;
    println!("wrote {}", file.display());
    Ok(())
}
