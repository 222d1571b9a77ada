//! `imiwae` command-line runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use imiwae::data::{load_csv, write_csv};
use imiwae::eval::{cross_validate_kappa1, CvConfig};
use imiwae::experiment::{self, ExperimentConfig, PRESET_NAMES};
use imiwae::impute::{ImputeConfig, ImputeMode};
use imiwae::model::{Checkpoint, ModelConfig};
use imiwae::theory::{run_check, TheoryConfig, TheoryReport, CHECK_NAMES};
use imiwae::train::TrainConfig;
use imiwae::Error;

/// Environment variable holding the worker-thread count.
const WORKERS_VAR: &str = "IMIWAE_WORKERS";

#[derive(Parser)]
#[command(
    name = "imiwae",
    version,
    about = "Importance-weighted deep latent variable models for MNAR data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Mnar,
    Mar,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config or a built-in preset.
    Run {
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Overrides the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Pool run reports of one kind into a mean/SD table (CSV).
    Aggregate {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a model to a CSV with missing cells and save a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kappa1: usize,
        #[arg(long, default_value_t = 128)]
        hidden_width: usize,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 10_000)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "NA")]
        missing_token: String,
    },
    /// Impute the missing cells of a CSV with a saved model.
    Impute {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "mnar")]
        mode: Mode,
        /// Importance samples per row.
        #[arg(long = "B", default_value_t = 10_000)]
        b: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "NA")]
        missing_token: String,
    },
    /// Sample rows from a saved model.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the Monte Carlo checks of the bounds and the mechanism oracle.
    VerifyTheory {
        /// One of monotone, bias-variance, convergence, lemma1; all when absent.
        #[arg(long)]
        check: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cross-validate the data latent dimension on a CSV.
    Cv {
        #[arg(long)]
        data: PathBuf,
        /// Candidate latent dimensions, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        kappa1: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0.2)]
        mask_fraction: f64,
        #[arg(long, default_value_t = 128)]
        hidden_width: usize,
        #[arg(long, default_value_t = 1000)]
        epochs: usize,
        #[arg(long = "B", default_value_t = 1000)]
        b: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "NA")]
        missing_token: String,
    },
    /// List the built-in presets.
    Presets,
}

fn configure_workers() -> Result<(), Error> {
    let Ok(raw) = std::env::var(WORKERS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(vec![format!("{WORKERS_VAR} must be a positive integer, got `{raw}`")]))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(vec![format!("cannot start {n} workers: {e}")]))
}

fn print_json(v: &impl serde::Serialize) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn execute(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Run {
            config,
            preset,
            output_dir,
        } => {
            let mut config = match (config, preset) {
                (Some(path), None) => ExperimentConfig::from_path(path)?,
                (None, Some(name)) => experiment::preset(&name)?,
                _ => return Err(Error::Config(vec!["give a config path or --preset".into()])),
            };
            if output_dir.is_some() {
                config.output_dir = output_dir;
            }
            let report = experiment::run_and_save(&config)?;
            print_json(&json!({
                "kind": report.kind,
                "name": report.name,
                "replications": report.replications.len(),
                "aggregates": report.aggregates,
                "wall_seconds": report.wall_seconds,
            }))?;
        }
        Command::Aggregate { reports, out } => {
            let csv = experiment::aggregate(&reports)?.to_csv()?;
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Train {
            data,
            out,
            kappa1,
            hidden_width,
            k,
            epochs,
            seed,
            missing_token,
        } => {
            let table = load_csv(&data, &missing_token)?.table;
            let mut model = ModelConfig::new(table.n_cols(), kappa1);
            model.hidden_width = hidden_width;
            model.k = k;
            let train = TrainConfig {
                max_epochs: epochs,
                seed,
                ..Default::default()
            };
            let (ckpt, fitted) = experiment::fit_table(&table, &model, &train)?;
            ckpt.save(&out)?;
            print_json(&json!({
                "epochs": fitted.trace.epochs(),
                "final_objective": fitted.trace.epoch_objective.last(),
                "stopped_early": fitted.trace.stopped_early,
                "checkpoint": out,
            }))?;
        }
        Command::Impute {
            model,
            data,
            out,
            mode,
            b,
            seed,
            missing_token,
        } => {
            let ckpt = Checkpoint::load(&model)?;
            let load = load_csv(&data, &missing_token)?;
            let config = ImputeConfig {
                b,
                seed,
                mode: match mode {
                    Mode::Mnar => ImputeMode::Mnar,
                    Mode::Mar => ImputeMode::Mar,
                },
            };
            let (table, ess) = experiment::impute_table(&ckpt, &load.table, &config)?;
            write_csv(&table, &out)?;
            print_json(&json!({
                "rows": table.n_rows(),
                "rows_dropped": load.dropped_all_missing,
                "min_ess": ess.iter().copied().fold(f64::INFINITY, f64::min),
                "output": out,
            }))?;
        }
        Command::Generate { model, n, out, seed } => {
            let ckpt = Checkpoint::load(&model)?;
            write_csv(&experiment::generate_table(&ckpt, n, seed)?, &out)?;
        }
        Command::VerifyTheory { check, seed } => {
            let config = TheoryConfig {
                seed,
                ..Default::default()
            };
            let names: Vec<&str> = match &check {
                Some(name) if CHECK_NAMES.contains(&name.as_str()) => vec![name.as_str()],
                Some(name) => {
                    return Err(Error::Config(vec![format!(
                        "unknown check `{name}` (known: {})",
                        CHECK_NAMES.join(", ")
                    )]))
                }
                None => CHECK_NAMES.to_vec(),
            };
            let mut report = TheoryReport::default();
            for name in names {
                run_check(name, &config, &mut report)?;
            }
            print_json(&report)?;
            return Ok(report.passed());
        }
        Command::Cv {
            data,
            kappa1,
            folds,
            mask_fraction,
            hidden_width,
            epochs,
            b,
            seed,
            missing_token,
        } => {
            let table = load_csv(&data, &missing_token)?.table;
            let (scaled, _) = imiwae::data::standardize(&table)?;
            let mut model = ModelConfig::new(table.n_cols(), 1);
            model.hidden_width = hidden_width;
            let train = TrainConfig {
                max_epochs: epochs,
                ..Default::default()
            };
            let cv = CvConfig {
                candidates: kappa1,
                folds,
                mask_fraction,
                seed,
            };
            let impute = ImputeConfig {
                b,
                seed,
                mode: ImputeMode::Mar,
            };
            let report = cross_validate_kappa1(&scaled, &cv, &model, &train, &impute)?;
            print_json(&json!({
                "candidates": report.candidates,
                "mean_rmse": report.mean_rmse,
                "rmse": report.rmse,
                "selected": report.selected,
                "elbow_selected": report.elbow_selected,
            }))?;
        }
        Command::Presets => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
        }
    }
    Ok(true)
}

/// Machine-readable error on stderr.
fn report_error(e: &Error) -> ExitCode {
    let (kind, problems) = match e {
        Error::Config(p) => ("config", p.clone()),
        Error::Aggregate(m) => ("aggregate", vec![m.clone()]),
        Error::Io(_) => ("io", vec![e.to_string()]),
        Error::Json(_) | Error::Csv(_) | Error::Parse { .. } => ("input", vec![e.to_string()]),
        Error::Diverged { .. } => ("diverged", vec![e.to_string()]),
        _ => ("runtime", vec![e.to_string()]),
    };
    let body = json!({ "error": kind, "message": e.to_string(), "problems": problems });
    eprintln!("{body}");
    ExitCode::from(if kind == "config" { 2 } else { 1 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_workers() {
        return report_error(&e);
    }
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        // Checks ran but did not pass.
        Ok(false) => ExitCode::from(3),
        Err(e) => report_error(&e),
    }
}
