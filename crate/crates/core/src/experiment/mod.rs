//! Experiment runner: JSON configs, seeded replications, reports and the
//! built-in presets.

mod config;
mod presets;
mod report;
mod run;

use std::time::Instant;

use rayon::prelude::*;

pub use config::{CvSection, DataSource, EvalConfig, ExperimentConfig, ExperimentKind};
pub use presets::{preset, PRESET_NAMES};
pub use report::{
    aggregate, aggregate_reports, Aggregate, AggregateTable, ReplicationRecord, ReplicationSeeds, RunReport,
};
pub use run::{fit_csv, fit_table, generate_table, impute_table};

use crate::error::Result;

/// Runs every replication of `config`. Replications are independent and
/// run on the rayon pool; records come back in replication order.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let start = Instant::now();
    let records = (0..config.replications)
        .into_par_iter()
        .map(|index| run_one(config, index))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport {
        kind: config.kind.as_str().to_string(),
        name: config.name.clone(),
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.resolved(),
        aggregates: RunReport::summarize(&records),
        replications: records,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs a single replication, as it would run inside [`run`].
pub fn run_one(config: &ExperimentConfig, index: usize) -> Result<ReplicationRecord> {
    let seeds = ReplicationSeeds::derive(config.base_seed, index);
    let start = Instant::now();
    log::info!("{}: replication {index} started (seed {})", config.name, seeds.root);
    let (metrics, details) = run::run_replication(config, index, &seeds)?;
    let wall_seconds = start.elapsed().as_secs_f64();
    log::info!("{}: replication {index} done in {wall_seconds:.1} s", config.name);
    Ok(ReplicationRecord {
        index,
        seeds,
        metrics,
        wall_seconds,
        details,
    })
}

/// [`run`], then writes `report.json` and `summary.csv` into the output
/// directory when one is configured.
pub fn run_and_save(config: &ExperimentConfig) -> Result<RunReport> {
    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir)?;
    }
    let report = run(config)?;
    if let Some(dir) = &config.output_dir {
        report.save(dir.join("report.json"))?;
        let table = aggregate_reports(std::slice::from_ref(&report))?;
        std::fs::write(dir.join("summary.csv"), table.to_csv()?)?;
    }
    Ok(report)
}
