use std::collections::BTreeMap;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Seeds of one replication. Each stage gets its own stream so changing,
/// say, the training seed leaves the data and the mask alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicationSeeds {
    pub root: u64,
    pub data: u64,
    pub missingness: u64,
    pub train: u64,
    pub impute: u64,
    pub eval: u64,
}

impl ReplicationSeeds {
    pub fn derive(base_seed: u64, replication: usize) -> Self {
        let root = SeededRng::new(base_seed).substream(replication as u64).next_u64();
        let stage = |i: u64| SeededRng::new(root).substream(i).next_u64();
        Self {
            root,
            data: stage(0),
            missingness: stage(1),
            train: stage(2),
            impute: stage(3),
            eval: stage(4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub seeds: ReplicationSeeds,
    pub metrics: BTreeMap<String, f64>,
    pub wall_seconds: f64,
    /// Kind-specific structured output (CV tables, theory reports, ...).
    #[serde(default)]
    pub details: Value,
}

/// Mean and sample SD of one metric over replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { n, mean, sd }
    }

    /// Combines two summaries as if their samples had been pooled.
    pub fn pool(self, other: Self) -> Self {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let mean = (self.n as f64 * self.mean + other.n as f64 * other.mean) / n as f64;
        let ss = |a: Self| (a.n as f64 - 1.0) * a.sd * a.sd + a.n as f64 * (a.mean - mean).powi(2);
        let sd = if n > 1 {
            ((ss(self) + ss(other)) / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { n, mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: String,
    pub name: String,
    pub software_version: String,
    /// The resolved config, every default filled in.
    pub config: Value,
    pub replications: Vec<ReplicationRecord>,
    pub aggregates: BTreeMap<String, Aggregate>,
    pub wall_seconds: f64,
}

impl RunReport {
    /// Recomputes `aggregates` from the replication records.
    pub fn summarize(records: &[ReplicationRecord]) -> BTreeMap<String, Aggregate> {
        let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in records {
            for (k, &v) in &r.metrics {
                by_metric.entry(k.clone()).or_default().push(v);
            }
        }
        by_metric.into_iter().map(|(k, v)| (k, Aggregate::of(&v))).collect()
    }

    /// Metric values across replications, in replication order.
    pub fn metric(&self, name: &str) -> Vec<f64> {
        self.replications
            .iter()
            .filter_map(|r| r.metrics.get(name).copied())
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Aggregate(format!("{} is not a run report: {e}", path.display())))
    }
}

/// Pooled statistics per metric over several reports of the same kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub kind: String,
    pub reports: usize,
    pub rows: BTreeMap<String, Aggregate>,
}

impl AggregateTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "n", "mean", "sd"])?;
        for (k, a) in &self.rows {
            w.write_record([k.clone(), a.n.to_string(), a.mean.to_string(), a.sd.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Pools the per-metric summaries of `reports`.
pub fn aggregate_reports(reports: &[RunReport]) -> Result<AggregateTable> {
    let Some(first) = reports.first() else {
        return Err(Error::Aggregate("no reports given".into()));
    };
    if let Some(other) = reports.iter().find(|r| r.kind != first.kind) {
        return Err(Error::Aggregate(format!(
            "cannot pool kind `{}` with kind `{}`",
            first.kind, other.kind
        )));
    }
    let mut rows: BTreeMap<String, Aggregate> = BTreeMap::new();
    for r in reports {
        for (k, a) in RunReport::summarize(&r.replications) {
            let slot = rows.entry(k).or_insert(Aggregate {
                n: 0,
                mean: 0.0,
                sd: 0.0,
            });
            *slot = slot.pool(a);
        }
    }
    Ok(AggregateTable {
        kind: first.kind.clone(),
        reports: reports.len(),
        rows,
    })
}

/// Loads and pools report files.
pub fn aggregate(paths: &[impl AsRef<Path>]) -> Result<AggregateTable> {
    let reports = paths.iter().map(RunReport::load).collect::<Result<Vec<_>>>()?;
    aggregate_reports(&reports)
}
