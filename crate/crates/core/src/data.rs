//! The data/mask pair every other module works on, plus CSV I/O and
//! standardization.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `n x p` value matrix with a paired observation mask (`true` = observed).
///
/// Values at unobserved positions are not part of the contract: they may
/// hold ground truth (for simulated data), `NaN` (for loaded data) or
/// anything else, and no consumer of a `DataTable` reads them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataTable {
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column_names: Option<Vec<String>>,
}

impl DataTable {
    pub fn new(values: Array2<f64>, mask: Array2<bool>) -> Result<Self> {
        if values.dim() != mask.dim() {
            return Err(Error::Shape(format!(
                "values are {:?} but mask is {:?}",
                values.dim(),
                mask.dim()
            )));
        }
        for ((i, j), &v) in values.indexed_iter() {
            if mask[[i, j]] && !v.is_finite() {
                return Err(Error::Domain(format!(
                    "observed value at ({i}, {j}) is not finite: {v}"
                )));
            }
        }
        Ok(Self {
            values,
            mask,
            column_names: None,
        })
    }

    pub fn fully_observed(values: Array2<f64>) -> Result<Self> {
        let mask = Array2::from_elem(values.dim(), true);
        Self::new(values, mask)
    }

    pub fn with_column_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_cols() {
            return Err(Error::Shape(format!(
                "{} column names for {} columns",
                names.len(),
                self.n_cols()
            )));
        }
        self.column_names = Some(names);
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_name(&self, j: usize) -> String {
        match &self.column_names {
            Some(names) => names[j].clone(),
            None => format!("column {j}"),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn row_all_missing(&self, i: usize) -> bool {
        self.mask.row(i).iter().all(|&m| !m)
    }

    pub fn row_complete(&self, i: usize) -> bool {
        self.mask.row(i).iter().all(|&m| m)
    }

    /// Fraction of entries that are unobserved.
    pub fn missing_rate(&self) -> f64 {
        let missing = self.mask.iter().filter(|&&m| !m).count();
        missing as f64 / self.mask.len().max(1) as f64
    }

    /// Missing rate over the rows that keep at least one observed entry.
    pub fn missing_rate_excluding_empty_rows(&self) -> f64 {
        let mut missing = 0usize;
        let mut total = 0usize;
        for row in self.mask.rows() {
            let obs = row.iter().filter(|&&m| m).count();
            if obs > 0 {
                missing += row.len() - obs;
                total += row.len();
            }
        }
        if total == 0 {
            1.0
        } else {
            missing as f64 / total as f64
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            values: self.values.select(Axis(0), rows),
            mask: self.mask.select(Axis(0), rows),
            column_names: self.column_names.clone(),
        }
    }

    /// Drops rows with no observed entry; returns the kept table and how many
    /// rows were dropped.
    pub fn drop_all_missing_rows(&self) -> (Self, usize) {
        let keep: Vec<usize> = (0..self.n_rows()).filter(|&i| !self.row_all_missing(i)).collect();
        let dropped = self.n_rows() - keep.len();
        (self.select_rows(&keep), dropped)
    }

    /// Copy with the given mask applied. Entries hidden by the new mask keep
    /// their values in memory (useful for ground-truth evaluation).
    pub fn with_mask(&self, mask: Array2<bool>) -> Result<Self> {
        let mut t = Self::new(self.values.clone(), mask)?;
        t.column_names = self.column_names.clone();
        Ok(t)
    }

    /// Copy with every unobserved entry overwritten by `NaN`.
    pub fn hide_missing(&self) -> Self {
        let mut t = self.clone();
        ndarray::Zip::from(&mut t.values).and(&self.mask).for_each(|v, &m| {
            if !m {
                *v = f64::NAN;
            }
        });
        t
    }

    /// Values with unobserved entries replaced by zero.
    pub fn zero_filled(&self) -> Array2<f64> {
        let mut out = self.values.clone();
        ndarray::Zip::from(&mut out).and(&self.mask).for_each(|v, &m| {
            if !m {
                *v = 0.0;
            }
        });
        out
    }

    /// Mask as 0.0/1.0.
    pub fn mask_f64(&self) -> Array2<f64> {
        self.mask.mapv(|m| if m { 1.0 } else { 0.0 })
    }

    /// Rows with every entry observed.
    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.row_complete(i)).collect()
    }

    /// Mean of the observed entries of column `j` (NaN if none).
    pub fn observed_column_mean(&self, j: usize) -> f64 {
        let (sum, n) = self
            .values
            .column(j)
            .iter()
            .zip(self.mask.column(j))
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }
}

/// Result of [`load_csv`].
#[derive(Debug, Clone)]
pub struct CsvLoad {
    pub table: DataTable,
    /// Rows removed because every cell was missing.
    pub dropped_all_missing: usize,
}

/// Reads a rectangular numeric CSV. Empty cells, `NaN` and `missing_token`
/// mark missing entries. A first line with no numeric cell is taken as a
/// header. Fully missing rows are dropped and counted.
pub fn load_csv(path: impl AsRef<Path>, missing_token: &str) -> Result<CsvLoad> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, missing_token)
}

pub fn parse_csv(text: &str, missing_token: &str) -> Result<CsvLoad> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let is_missing = |cell: &str| cell.is_empty() || cell == "NaN" || cell == missing_token;

    let mut records: Vec<csv::StringRecord> = Vec::new();
    for rec in reader.records() {
        records.push(rec?);
    }
    if records.is_empty() {
        return Err(Error::Parse {
            row: 0,
            column: 0,
            message: "empty file".into(),
        });
    }

    let first = &records[0];
    let header = first.iter().all(|c| !is_missing(c) && c.parse::<f64>().is_err());
    let names = header.then(|| first.iter().map(str::to_string).collect::<Vec<_>>());
    let body = if header { &records[1..] } else { &records[..] };
    if body.is_empty() {
        return Err(Error::Parse {
            row: 1,
            column: 0,
            message: "no data rows".into(),
        });
    }

    let width = first.len();
    let mut values = Vec::with_capacity(body.len() * width);
    let mut mask = Vec::with_capacity(body.len() * width);
    let offset = usize::from(header);
    for (r, rec) in body.iter().enumerate() {
        // 1-based line numbers in messages
        let line = r + offset + 1;
        if rec.len() != width {
            return Err(Error::Parse {
                row: line,
                column: rec.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            if is_missing(cell) {
                values.push(f64::NAN);
                mask.push(false);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row: line,
                    column: c + 1,
                    message: format!("not a number: {cell:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row: line,
                        column: c + 1,
                        message: format!("non-finite value {cell:?}"),
                    });
                }
                values.push(v);
                mask.push(true);
            }
        }
    }
    let n = body.len();
    let values = Array2::from_shape_vec((n, width), values).unwrap();
    let mask = Array2::from_shape_vec((n, width), mask).unwrap();
    let mut table = DataTable::new(values, mask)?;
    if let Some(names) = names {
        table = table.with_column_names(names)?;
    }
    let (table, dropped) = table.drop_all_missing_rows();
    if dropped > 0 {
        log::warn!("dropped {dropped} fully missing rows");
    }
    Ok(CsvLoad {
        table,
        dropped_all_missing: dropped,
    })
}

/// Writes values as CSV, unobserved cells as `NaN`.
pub fn write_csv(table: &DataTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(names) = &table.column_names {
        w.write_record(names)?;
    }
    for (row, mrow) in table.values.rows().into_iter().zip(table.mask.rows()) {
        let cells: Vec<String> = row
            .iter()
            .zip(mrow)
            .map(|(v, &m)| if m { format!("{v}") } else { "NaN".to_string() })
            .collect();
        w.write_record(&cells)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-column location/scale computed on observed entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardization {
    /// Statistics of the observed entries, population (1/n) convention.
    pub fn fit(table: &DataTable) -> Result<Self> {
        let p = table.n_cols();
        let mut means = Vec::with_capacity(p);
        let mut stds = Vec::with_capacity(p);
        for j in 0..p {
            let obs: Vec<f64> = table
                .values
                .column(j)
                .iter()
                .zip(table.mask.column(j))
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .collect();
            if obs.len() < 2 {
                return Err(Error::Domain(format!(
                    "{} has {} observed entries; at least 2 are needed to standardize",
                    table.column_name(j),
                    obs.len()
                )));
            }
            let m = obs.iter().sum::<f64>() / obs.len() as f64;
            let var = obs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / obs.len() as f64;
            if !(var > 0.0) {
                return Err(Error::Domain(format!(
                    "{} is constant on its observed entries",
                    table.column_name(j)
                )));
            }
            means.push(m);
            stds.push(var.sqrt());
        }
        Ok(Self { means, stds })
    }

    /// Applies the transform to every entry (observed or not); the mask is
    /// untouched so hidden entries are never read downstream.
    pub fn apply(&self, table: &DataTable) -> DataTable {
        let mut out = table.clone();
        self.apply_values(&mut out.values);
        out
    }

    pub fn apply_values(&self, values: &mut Array2<f64>) {
        for (j, mut col) in values.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.means[j]) / self.stds[j]);
        }
    }

    pub fn invert_values(&self, values: &mut Array2<f64>) {
        for (j, mut col) in values.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v * self.stds[j] + self.means[j]);
        }
    }

    pub fn invert(&self, table: &DataTable) -> DataTable {
        let mut out = table.clone();
        self.invert_values(&mut out.values);
        out
    }

    pub fn means_array(&self) -> Array1<f64> {
        Array1::from(self.means.clone())
    }
}

/// Standardizes on observed entries; returns the table and the statistics
/// needed to undo it.
pub fn standardize(table: &DataTable) -> Result<(DataTable, Standardization)> {
    let stats = Standardization::fit(table)?;
    Ok((stats.apply(table), stats))
}
