//! Conditional-mean imputation by self-normalized importance sampling, and
//! sampling new rows from the fitted generative model.
//!
//! For a row with missing entries, `B` tuples `(z_b, z̃_b, x̂_b)` are drawn
//! from the encoder and the data decoder and weighted by
//!
//! ```text
//! w_b = p(x_obs | z_b) p(r | x̄_b, z̃_b) p(z_b) p(z̃_b) / (q(z_b) q(z̃_b))
//! ```
//!
//! in `mnar` mode, or without the `p(r | ·)` factor in `mar` mode. The
//! imputation is `Σ_b α_b x̂_b` restricted to the missing entries, with
//! `α_b = w_b / Σ w`. All weight arithmetic is done in the log domain and
//! streamed over chunks of draws, so `B` is limited only by time.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataTable;
use crate::error::{Error, Result};
use crate::model::{BatchNoise, ModelParams};
use crate::rng::SeededRng;

const CHUNK: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeMode {
    /// Weights include the missingness model.
    #[default]
    Mnar,
    /// Weights ignore the missingness model: estimates `E[x_mis | x_obs]`.
    Mar,
}

fn default_b() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputeConfig {
    /// Importance samples per row.
    #[serde(default = "default_b")]
    pub b: usize,
    #[serde(default)]
    pub mode: ImputeMode,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self {
            b: 10_000,
            mode: ImputeMode::Mnar,
            seed: 0,
        }
    }
}

impl ImputeConfig {
    pub fn problems(&self) -> Vec<String> {
        if self.b == 0 {
            vec!["impute.b must be at least 1".into()]
        } else {
            Vec::new()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedTable {
    /// Observed entries copied from the input, missing ones imputed.
    pub values: Array2<f64>,
    /// Effective sample size `(Σw)² / Σw²` per row.
    pub ess: Vec<f64>,
    pub mask: Array2<bool>,
}

impl ImputedTable {
    pub fn to_table(&self) -> DataTable {
        DataTable::fully_observed(self.values.clone()).expect("imputed values are finite")
    }

    /// Rows whose effective sample size fell below `fraction · b`.
    pub fn low_ess_rows(&self, b: usize, fraction: f64) -> Vec<usize> {
        let limit = fraction * b as f64;
        self.ess
            .iter()
            .enumerate()
            .filter(|(_, &e)| e < limit)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Every draw of one row, materialized.
#[derive(Debug, Clone)]
pub struct RowDraws {
    pub log_w: Vec<f64>,
    /// `B × p` decoder draws.
    pub x_hat: Array2<f64>,
}

impl RowDraws {
    pub fn normalized_weights(&self) -> Vec<f64> {
        let lse = crate::math::logsumexp(&self.log_w);
        self.log_w.iter().map(|&l| (l - lse).exp()).collect()
    }
}

fn check_row(params: &ModelParams, row: &[f64], mask: &[bool]) -> Result<()> {
    let p = params.p();
    if row.len() != p || mask.len() != p {
        return Err(Error::Shape(format!("row and mask must have length {p}")));
    }
    Ok(())
}

/// Runs `f` on each chunk of draws for a row. Row `row_id` draws from
/// substream `row_id` of the seed, so results do not depend on row order.
fn for_each_chunk(
    params: &ModelParams,
    row: &[f64],
    mask: &[bool],
    config: &ImputeConfig,
    row_id: u64,
    mut f: impl FnMut(&[f64], ArrayView2<f64>),
) -> Result<()> {
    let p = params.p();
    let mut rng = SeededRng::new(config.seed).substream(row_id);
    let values = ArrayView2::from_shape((1, p), row).unwrap();
    let mask = ArrayView2::from_shape((1, p), mask).unwrap();
    let mut left = config.b;
    while left > 0 {
        let c = left.min(CHUNK);
        let noise = BatchNoise::draw(1, c, &params.config, &mut rng);
        let fwd = params.forward(values, mask, &noise, config.mode == ImputeMode::Mnar)?;
        f(fwd.log_w.row(0).as_slice().unwrap(), fwd.x_hat.view());
        left -= c;
    }
    Ok(())
}

/// All `B` weighted draws for one row.
pub fn draw_row(
    params: &ModelParams,
    row: &[f64],
    mask: &[bool],
    config: &ImputeConfig,
    row_id: u64,
) -> Result<RowDraws> {
    check_row(params, row, mask)?;
    let mut log_w = Vec::with_capacity(config.b);
    let mut chunks = Vec::new();
    for_each_chunk(params, row, mask, config, row_id, |lw, xh| {
        log_w.extend_from_slice(lw);
        chunks.push(xh.to_owned());
    })?;
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    let x_hat = ndarray::concatenate(Axis(0), &views).unwrap();
    Ok(RowDraws { log_w, x_hat })
}

/// Imputation of one row and its effective sample size. Complete rows are
/// returned unchanged with ESS = B.
pub fn impute_row(
    params: &ModelParams,
    row: &[f64],
    mask: &[bool],
    config: &ImputeConfig,
    row_id: u64,
) -> Result<(Vec<f64>, f64)> {
    check_row(params, row, mask)?;
    if mask.iter().all(|&m| m) {
        return Ok((row.to_vec(), config.b as f64));
    }
    let p = params.p();
    // running sums relative to the largest log weight seen so far
    let mut top = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut acc = vec![0.0; p];
    for_each_chunk(params, row, mask, config, row_id, |lw, xh| {
        let chunk_top = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if chunk_top > top {
            let f = (top - chunk_top).exp();
            sum *= f;
            sum_sq *= f * f;
            acc.iter_mut().for_each(|a| *a *= f);
            top = chunk_top;
        }
        for (s, &l) in lw.iter().enumerate() {
            let w = (l - top).exp();
            sum += w;
            sum_sq += w * w;
            for (a, &x) in acc.iter_mut().zip(xh.row(s)) {
                *a += w * x;
            }
        }
    })?;
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(Error::Numeric(format!(
            "importance weights of row {row_id} do not normalize"
        )));
    }
    let values = (0..p).map(|j| if mask[j] { row[j] } else { acc[j] / sum }).collect();
    Ok((values, sum * sum / sum_sq))
}

/// Imputes every row of `table`. Rows run in parallel; each has its own
/// random stream, so the output is independent of scheduling.
pub fn impute(params: &ModelParams, table: &DataTable, config: &ImputeConfig) -> Result<ImputedTable> {
    if config.b == 0 {
        return Err(Error::Domain("B must be at least 1".into()));
    }
    if table.n_cols() != params.p() {
        return Err(Error::Shape(format!(
            "table has {} columns, model expects {}",
            table.n_cols(),
            params.p()
        )));
    }
    if params.epochs_trained == 0 {
        log::warn!("imputing with an untrained model");
    }
    let n = table.n_rows();
    let rows: Vec<Result<(Vec<f64>, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = table.values.row(i).to_vec();
            let mask = table.mask.row(i).to_vec();
            impute_row(params, &row, &mask, config, i as u64)
        })
        .collect();
    let mut values = Array2::zeros((n, params.p()));
    let mut ess = Vec::with_capacity(n);
    for (i, r) in rows.into_iter().enumerate() {
        let (v, e) = r?;
        values.row_mut(i).assign(&ndarray::Array1::from(v));
        ess.push(e);
    }
    let out = ImputedTable {
        values,
        ess,
        mask: table.mask.clone(),
    };
    let low = out.low_ess_rows(config.b, 0.01);
    if !low.is_empty() {
        log::warn!(
            "{} of {n} rows have effective sample size below 1% of B = {} (first: row {})",
            low.len(),
            config.b,
            low[0]
        );
    }
    Ok(out)
}

/// `n` synthetic rows: `z ~ N(0, I)`, `x ~ N(f_θ(z), γ I)`. Each row draws
/// `z` then the observation noise.
pub fn generate(params: &ModelParams, n: usize, seed: u64) -> Result<DataTable> {
    let (k1, p) = (params.config.kappa1, params.p());
    let mut rng = SeededRng::new(seed);
    let mut z = Array2::zeros((n, k1));
    let mut eps = Array2::zeros((n, p));
    for i in 0..n {
        rng.fill_normal(z.row_mut(i).as_slice_mut().unwrap());
        rng.fill_normal(eps.row_mut(i).as_slice_mut().unwrap());
    }
    let mut x = params.decoder.forward_batch(z.view());
    x.scaled_add(params.gamma().sqrt(), &eps);
    DataTable::fully_observed(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::softplus_inv;
    use crate::missingness::Linearity;
    use crate::model::ModelConfig;
    use ndarray::array;

    fn model(seed: u64) -> ModelParams {
        let mut c = ModelConfig::new(3, 2);
        c.hidden_width = 8;
        c.missingness_decoder = Linearity::Nonlinear;
        ModelParams::new(&c, &mut SeededRng::new(seed)).unwrap()
    }

    fn cfg(b: usize, mode: ImputeMode) -> ImputeConfig {
        ImputeConfig { b, mode, seed: 5 }
    }

    #[test]
    fn complete_rows_untouched() {
        let p = model(1);
        let t = DataTable::new(
            array![[0.1, 0.2, 0.3], [1.0, f64::NAN, 2.0]],
            array![[true; 3], [true, false, true]],
        )
        .unwrap();
        for mode in [ImputeMode::Mnar, ImputeMode::Mar] {
            let out = impute(&p, &t, &cfg(50, mode)).unwrap();
            assert_eq!(out.values.row(0).to_vec(), vec![0.1, 0.2, 0.3]);
            assert_eq!(out.ess[0], 50.0);
            assert_eq!(out.values[[1, 0]], 1.0);
            assert_eq!(out.values[[1, 2]], 2.0);
            assert!(out.values[[1, 1]].is_finite());
        }
    }

    #[test]
    fn streaming_matches_materialized() {
        let p = model(2);
        let row = [0.4, 0.0, -0.2];
        let mask = [true, false, true];
        let c = cfg(1234, ImputeMode::Mnar);
        let draws = draw_row(&p, &row, &mask, &c, 7).unwrap();
        let w = draws.normalized_weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let expect: f64 = w.iter().zip(draws.x_hat.column(1)).map(|(a, x)| a * x).sum();
        let ess_expect = 1.0 / w.iter().map(|a| a * a).sum::<f64>();
        let (v, ess) = impute_row(&p, &row, &mask, &c, 7).unwrap();
        assert!((v[1] - expect).abs() < 1e-12);
        assert!((ess - ess_expect).abs() < 1e-8 * ess_expect);
        assert!((1.0..=1234.0).contains(&ess));
    }

    #[test]
    fn single_draw_is_the_imputation() {
        let p = model(3);
        let row = [0.0, 0.9, 0.0];
        let mask = [false, true, false];
        let c = cfg(1, ImputeMode::Mnar);
        let draws = draw_row(&p, &row, &mask, &c, 0).unwrap();
        let (v, ess) = impute_row(&p, &row, &mask, &c, 0).unwrap();
        assert_eq!(v[0], draws.x_hat[[0, 0]]);
        assert_eq!(v[2], draws.x_hat[[0, 2]]);
        assert_eq!(ess, 1.0);
    }

    #[test]
    fn equal_weights_give_plain_average() {
        // all-missing row, prior-matching encoder: every log weight is equal
        let mut p = model(4);
        let kt = p.config.kappa1 + p.config.kappa2;
        let out = p.encoder.layers_mut().last_mut().unwrap();
        out.weight.fill(0.0);
        for d in 0..kt {
            out.bias[d] = 0.0;
            out.bias[kt + d] = softplus_inv(1.0);
        }
        let row = [0.0; 3];
        let mask = [false; 3];
        let c = cfg(300, ImputeMode::Mar);
        let draws = draw_row(&p, &row, &mask, &c, 1).unwrap();
        let (v, ess) = impute_row(&p, &row, &mask, &c, 1).unwrap();
        for j in 0..3 {
            let avg = draws.x_hat.column(j).sum() / 300.0;
            assert!((v[j] - avg).abs() < 1e-12);
        }
        assert!((ess - 300.0).abs() < 1e-9);
    }

    #[test]
    fn row_order_does_not_matter() {
        let p = model(5);
        let t = DataTable::new(
            array![[0.1, 0.0, 0.3], [0.0, 0.5, 0.0], [1.0, 1.0, 0.0]],
            array![[true, false, true], [false, true, false], [true, true, false]],
        )
        .unwrap();
        let c = cfg(200, ImputeMode::Mnar);
        let a = impute(&p, &t, &c).unwrap();
        for i in 0..3 {
            let row = t.values.row(i).to_vec();
            let mask = t.mask.row(i).to_vec();
            assert_eq!(
                impute_row(&p, &row, &mask, &c, i as u64).unwrap().0,
                a.values.row(i).to_vec()
            );
        }
    }

    #[test]
    fn generated_moments_with_zero_decoder() {
        let mut c = ModelConfig::new(2, 1);
        c.hidden_width = 4;
        let p = ModelParams::zeros(&c).unwrap();
        let g = generate(&p, 100_000, 3).unwrap();
        assert_eq!(g.n_rows(), 100_000);
        for j in 0..2 {
            let col = g.values.column(j);
            let mean = col.sum() / 1e5;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1e5;
            // 2% of the standard deviation 0.5
            assert!(mean.abs() < 0.01, "{mean}");
            assert!((var / 0.25 - 1.0).abs() < 0.02, "{var}");
        }
        assert_eq!(generate(&p, 10, 3).unwrap(), generate(&p, 10, 3).unwrap());
    }
}
