//! Command implementations behind the `nlqmm` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nlqmm::fitter::{fit, FitControl};
use nlqmm::inference::cluster_bootstrap;
use nlqmm::simulate::{raw_csv, run_study, summarize_to_table, summary_csv, Estimator, ScenarioSpec};
use nlqmm::QuantileLevel;
use rayon::prelude::*;

use crate::config::{BootstrapConfig, FitConfig};
use crate::data;
use crate::error::{CliError, CliResult, EXIT_NUMERICAL, EXIT_OK};
use crate::output::{fit_file_name, write_atomic, BootstrapSummary, FitOutput};
use crate::predict;

/// Environment variable read when `--threads` is absent.
pub const THREADS_ENV: &str = "NLQMM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "nlqmm", version, about = "Nonlinear quantile mixed models")]
pub struct Cli {
    /// Worker threads (default: NLQMM_THREADS, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to long-format CSV data; writes one JSON file per τ.
    Fit(FitArgs),
    /// Run the Monte Carlo study for the built-in scenarios.
    Simulate(SimulateArgs),
    /// Evaluate fitted quantile curves on a grid.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Quantile levels, overriding the config.
    #[arg(long, value_delimiter = ',')]
    pub tau: Option<Vec<f64>>,
    /// Bootstrap replicates (0 disables), overriding the config.
    #[arg(long)]
    pub boot: Option<usize>,
    /// Bootstrap seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario ids (1 to 4).
    #[arg(long, value_delimiter = ',', required = true)]
    pub scenario: Vec<u8>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.5])]
    pub tau: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub gamma: f64,
    /// Draw centered χ² errors in scenario 2.
    #[arg(long)]
    pub centered: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Result files written by `fit`.
    #[arg(long, required = true, num_args = 1..)]
    pub fit: Vec<PathBuf>,
    /// `start:stop:step` or a comma-separated list.
    #[arg(long)]
    pub grid: String,
    /// Output CSV for the population curves.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-cluster curves to `<out stem>_clusters.csv`.
    #[arg(long)]
    pub clusters: bool,
    /// Covariate values for the population curve, e.g. `--set year=1989`.
    #[arg(long = "set")]
    pub set: Vec<String>,
}

/// Thread count from the flag or the environment.
pub fn thread_count(flag: Option<usize>) -> CliResult<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV}=\"{v}\" is not a thread count"))),
        _ => Ok(None),
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Returns the exit status: 0 when every fit converged, 2 otherwise.
pub fn cmd_fit(args: &FitArgs) -> CliResult<i32> {
    let mut config = FitConfig::from_path(&args.config)?;
    if let Some(taus) = &args.tau {
        config.taus = taus.clone();
    }
    match (args.boot, &mut config.bootstrap) {
        (Some(0), b) => *b = None,
        (Some(n), Some(b)) => b.replicates = n,
        (Some(n), b @ None) => {
            *b = Some(BootstrapConfig {
                replicates: n,
                seed: 0,
            })
        }
        (None, _) => {}
    }
    if let (Some(seed), Some(b)) = (args.seed, &mut config.bootstrap) {
        b.seed = seed;
    }
    config.validate()?;
    let layout = config.layout()?;
    let loaded = data::load(&args.data, &config, &layout)?;
    let control = config.fit_control(layout.beta_start.clone())?;
    ensure_dir(&args.out)?;

    let results: Vec<CliResult<FitOutput>> = config
        .taus
        .par_iter()
        .map(|&tau| fit_one(&config, &layout, &loaded, &control, tau))
        .collect();
    let mut all_converged = true;
    for (tau, result) in config.taus.iter().zip(results) {
        let out = result?;
        if !out.converged {
            log::warn!("fit at τ = {tau} did not converge");
            all_converged = false;
        }
        write_atomic(&args.out.join(fit_file_name(*tau)), out.to_json().as_bytes())?;
    }
    Ok(if all_converged { EXIT_OK } else { EXIT_NUMERICAL })
}

fn fit_one(
    config: &FitConfig,
    layout: &crate::config::Layout,
    loaded: &data::LoadedData,
    control: &FitControl,
    tau: f64,
) -> CliResult<FitOutput> {
    let level = QuantileLevel::new(tau)?;
    let result = fit(&loaded.dataset, &*layout.model, &layout.design, &layout.variance, level, control)?;
    log::info!(
        "τ = {tau}: ℓ = {:.4} after {} outer iterations",
        result.loglik,
        result.outer_iterations
    );
    let (se, summary) = match &config.bootstrap {
        Some(b) => {
            let warm = FitControl {
                theta_start: Some(result.theta.clone()),
                ..control.clone()
            };
            let boot = cluster_bootstrap(
                &loaded.dataset,
                &*layout.model,
                &layout.design,
                &layout.variance,
                level,
                &warm,
                b.replicates,
                b.seed,
            )?;
            let summary = BootstrapSummary {
                requested: boot.b_requested,
                used: boot.b_used,
                failures: boot.failures,
                seed: b.seed,
            };
            (Some(boot.se), Some(summary))
        }
        None => (None, None),
    };
    Ok(FitOutput::new(
        config,
        layout,
        &result,
        &loaded.cluster_values,
        se.as_deref(),
        summary,
    ))
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<i32> {
    let mut scenarios = Vec::with_capacity(args.scenario.len());
    for &id in &args.scenario {
        let mut spec = ScenarioSpec::new(id, args.seed)?;
        spec.centered_chisq = args.centered;
        scenarios.push(spec);
    }
    for &t in &args.tau {
        QuantileLevel::new(t)?;
    }
    let control = FitControl {
        gamma: args.gamma,
        ..Default::default()
    };
    control.validate()?;
    let summary = run_study(&scenarios, &args.tau, args.reps, &control, &[Estimator::Nlqmm, Estimator::Nlrq])?;
    ensure_dir(&args.out)?;
    write_atomic(&args.out.join("summary.csv"), summary_csv(&summary).as_bytes())?;
    write_atomic(&args.out.join("raw.csv"), raw_csv(&summary).as_bytes())?;
    write_atomic(&args.out.join("summary.txt"), summarize_to_table(&summary).as_bytes())?;
    log::info!("study finished in {:.1?}", summary.elapsed);
    Ok(EXIT_OK)
}

pub fn cmd_predict(args: &PredictArgs) -> CliResult<i32> {
    let grid = predict::parse_grid(&args.grid)?;
    let settings = predict::parse_settings(&args.set)?;
    let mut population = Vec::new();
    let mut per_cluster = Vec::new();
    for path in &args.fit {
        let fit = FitOutput::read(path)?;
        for row in predict::predict(&fit, &grid, &settings, args.clusters)? {
            if row.cluster.is_some() {
                per_cluster.push(row);
            } else {
                population.push(row);
            }
        }
    }
    write_atomic(&args.out, predict::to_csv(&population, false)?.as_bytes())?;
    if args.clusters {
        write_atomic(&clusters_path(&args.out), predict::to_csv(&per_cluster, true)?.as_bytes())?;
    }
    Ok(EXIT_OK)
}

/// `curves.csv` becomes `curves_clusters.csv`.
pub fn clusters_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "predictions".into(), |s| s.to_string_lossy().into_owned());
    let ext = out.extension().map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_clusters.{ext}"))
}

pub fn execute(cli: &Cli) -> CliResult<i32> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Predict(a) => cmd_predict(a),
    }
}
