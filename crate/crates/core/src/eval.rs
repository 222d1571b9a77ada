//! Metrics: masked-entry RMSE, kernel MMD, bootstrap intervals for a mean,
//! and cross-validated selection of the data latent dimension.

use ndarray::{Array2, ArrayView2, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::DataTable;
use crate::error::{Error, Result};
use crate::impute::{impute, ImputeConfig, ImputeMode};
use crate::model::ModelConfig;
use crate::rng::SeededRng;
use crate::train::{train, TrainConfig};

/// Per-sample cap used when estimating MMD on large tables.
pub const MMD_MAX_PER_SIDE: usize = 2000;

/// Root mean squared error over the entries where `original_mask` is false.
pub fn imputation_rmse(
    truth: ArrayView2<f64>,
    imputed: ArrayView2<f64>,
    original_mask: ArrayView2<bool>,
) -> Result<f64> {
    if truth.dim() != imputed.dim() || truth.dim() != original_mask.dim() {
        return Err(Error::Shape(format!(
            "truth {:?}, imputed {:?} and mask {:?} must agree",
            truth.dim(),
            imputed.dim(),
            original_mask.dim()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    ndarray::Zip::from(truth)
        .and(imputed)
        .and(original_mask)
        .for_each(|&t, &v, &m| {
            if !m {
                sum += (t - v) * (t - v);
                count += 1;
            }
        });
    if count == 0 {
        return Err(Error::Domain("no missing entries to score".into()));
    }
    Ok((sum / count as f64).sqrt())
}

/// RMSE on an explicit list of `(row, column)` cells.
pub fn rmse_on_cells(truth: ArrayView2<f64>, imputed: ArrayView2<f64>, cells: &[(usize, usize)]) -> Result<f64> {
    if cells.is_empty() {
        return Err(Error::Domain("no cells to score".into()));
    }
    let sum: f64 = cells
        .iter()
        .map(|&(i, j)| (truth[[i, j]] - imputed[[i, j]]).powi(2))
        .sum();
    Ok((sum / cells.len() as f64).sqrt())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mmd {
    pub mmd2: f64,
    /// RBF bandwidth σ in `exp(-d² / 2σ²)`.
    pub bandwidth: f64,
    pub n_a: usize,
    pub n_b: usize,
}

/// Median Euclidean distance over all pairs of the pooled sample.
pub fn median_pairwise_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let pooled: Vec<&[f64]> = a
        .rows()
        .into_iter()
        .chain(b.rows())
        .map(|r| r.to_slice().expect("standard layout"))
        .collect();
    let mut d = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    let m = d.len();
    let (_, hi, _) = d.select_nth_unstable_by(m / 2, f64::total_cmp);
    let upper = *hi;
    let median_sq = if m % 2 == 1 {
        upper
    } else {
        let lower = d[..m / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    median_sq.sqrt()
}

/// Unbiased estimate of squared MMD with an RBF kernel of the given
/// bandwidth.
pub fn mmd_squared_with_bandwidth(a: ArrayView2<f64>, b: ArrayView2<f64>, bandwidth: f64) -> Result<Mmd> {
    let (n, m) = (a.nrows(), b.nrows());
    if n < 2 || m < 2 {
        return Err(Error::Domain(format!(
            "MMD needs at least 2 rows per sample, got {n} and {m}"
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "samples have {} and {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Domain(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let scale = -0.5 / (bandwidth * bandwidth);
    let within = |x: &ArrayView2<f64>| {
        let rows: Vec<&[f64]> = x.rows().into_iter().map(|r| r.to_slice().unwrap()).collect();
        let mut s = 0.0;
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                s += (scale * sq_dist(rows[i], rows[j])).exp();
            }
        }
        2.0 * s / (rows.len() * (rows.len() - 1)) as f64
    };
    let (av, bv) = (a.view(), b.view());
    let kaa = within(&av);
    let kbb = within(&bv);
    let mut kab = 0.0;
    for ra in av.rows() {
        let ra = ra.to_slice().unwrap();
        for rb in bv.rows() {
            kab += (scale * sq_dist(ra, rb.to_slice().unwrap())).exp();
        }
    }
    kab /= (n * m) as f64;
    Ok(Mmd {
        mmd2: kaa + kbb - 2.0 * kab,
        bandwidth,
        n_a: n,
        n_b: m,
    })
}

/// Unbiased squared MMD, RBF kernel with the pooled median-distance
/// bandwidth.
pub fn mmd_squared(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Mmd> {
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Domain(format!(
            "MMD needs at least 2 rows per sample, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "samples have {} and {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let bw = median_pairwise_distance(a.view(), b.view());
    mmd_squared_with_bandwidth(a.view(), b.view(), bw)
}

/// Random subset of at most `max_rows` rows, in their original order.
pub fn subsample_rows(x: ArrayView2<f64>, max_rows: usize, rng: &mut SeededRng) -> Array2<f64> {
    if x.nrows() <= max_rows {
        return x.to_owned();
    }
    let mut idx: Vec<usize> = (0..x.nrows()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(max_rows);
    idx.sort_unstable();
    x.select(Axis(0), &idx)
}

/// [`mmd_squared`] on at most `max_per_side` rows drawn from each sample.
pub fn mmd_squared_subsampled(a: ArrayView2<f64>, b: ArrayView2<f64>, max_per_side: usize, seed: u64) -> Result<Mmd> {
    let rng = SeededRng::new(seed);
    let a = subsample_rows(a, max_per_side, &mut rng.substream(0));
    let b = subsample_rows(b, max_per_side, &mut rng.substream(1));
    mmd_squared(a.view(), b.view())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub estimate: f64,
    /// 2.5% percentile of the bootstrap means.
    pub lower: f64,
    /// 97.5% percentile of the bootstrap means.
    pub upper: f64,
    pub reps: usize,
}

impl MeanEstimate {
    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Column mean with a 95% percentile bootstrap interval over `reps`
/// row-resampled means.
pub fn mean_estimate_with_ci(values: &[f64], reps: usize, seed: u64) -> Result<MeanEstimate> {
    if values.is_empty() {
        return Err(Error::Domain("cannot estimate the mean of an empty column".into()));
    }
    if reps < 100 {
        return Err(Error::Domain(format!(
            "bootstrap needs at least 100 replicates, got {reps}"
        )));
    }
    let n = values.len();
    let estimate = values.iter().sum::<f64>() / n as f64;
    let mut rng = SeededRng::new(seed);
    let mut means: Vec<f64> = (0..reps)
        .map(|_| (0..n).map(|_| values[rng.below(n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    Ok(MeanEstimate {
        estimate,
        lower: quantile_sorted(&means, 0.025),
        upper: quantile_sorted(&means, 0.975),
        reps,
    })
}

/// Knee of a decreasing score curve: the candidate farthest from the chord
/// joining the first and last points (after scaling both axes to [0, 1]).
/// Falls back to the minimum for fewer than three candidates.
pub fn elbow_select(candidates: &[usize], scores: &[f64]) -> usize {
    assert_eq!(candidates.len(), scores.len());
    let argmin = || {
        let i = (0..scores.len())
            .min_by(|&a, &b| scores[a].total_cmp(&scores[b]))
            .unwrap();
        candidates[i]
    };
    if candidates.len() < 3 {
        return argmin();
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by_key(|&i| candidates[i]);
    let xs: Vec<f64> = order.iter().map(|&i| candidates[i] as f64).collect();
    let ys: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let (x0, x1) = (xs[0], *xs.last().unwrap());
    let ymin = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let ymax = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if ymax == ymin {
        return candidates[order[0]];
    }
    let nx: Vec<f64> = xs.iter().map(|x| (x - x0) / (x1 - x0)).collect();
    let ny: Vec<f64> = ys.iter().map(|y| (y - ymin) / (ymax - ymin)).collect();
    let (ax, ay, bx, by) = (nx[0], ny[0], *nx.last().unwrap(), *ny.last().unwrap());
    let norm = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for t in 0..nx.len() {
        let d = ((by - ay) * nx[t] - (bx - ax) * ny[t] + bx * ay - by * ax).abs() / norm;
        if d > best_d {
            best_d = d;
            best = t;
        }
    }
    candidates[order[best]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub candidates: Vec<usize>,
    pub folds: usize,
    /// Fraction of observed validation entries hidden for scoring.
    pub mask_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub candidates: Vec<usize>,
    pub folds: usize,
    /// Validation fold of every row.
    pub fold_of_row: Vec<usize>,
    /// Cells hidden in each fold, as `(row, column)` of the input table.
    pub synthetic_cells: Vec<Vec<(usize, usize)>>,
    /// `rmse[c][f]`: candidate `c`, fold `f`.
    pub rmse: Vec<Vec<f64>>,
    pub mean_rmse: Vec<f64>,
    /// Candidate with the smallest mean RMSE.
    pub selected: usize,
    /// Candidate chosen by the elbow rule.
    pub elbow_selected: usize,
}

/// Assigns rows to `folds` folds of near-equal size at random.
pub fn fold_assignment(n: usize, folds: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut fold = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        fold[row] = pos % folds;
    }
    fold
}

/// Cross-validates the data latent dimension. In every fold the model is
/// trained on the remaining rows; a random `mask_fraction` of the observed
/// validation entries is hidden, imputed ignoring the missingness model,
/// and scored by RMSE on exactly those entries.
pub fn cross_validate_kappa1(
    table: &DataTable,
    cv: &CvConfig,
    model: &ModelConfig,
    train_config: &TrainConfig,
    impute_config: &ImputeConfig,
) -> Result<CvReport> {
    let p = table.n_cols();
    let mut problems = Vec::new();
    if cv.candidates.is_empty() {
        problems.push("at least one candidate is required".to_string());
    }
    if let Some(&c) = cv.candidates.iter().find(|&&c| c == 0 || c > p) {
        problems.push(format!("candidate latent dimension {c} is outside 1..={p}"));
    }
    if cv.folds < 2 || cv.folds > table.n_rows() {
        problems.push(format!("fold count {} must be in 2..={}", cv.folds, table.n_rows()));
    }
    if !(cv.mask_fraction > 0.0 && cv.mask_fraction <= 0.5) {
        problems.push(format!("mask fraction {} must be in (0, 0.5]", cv.mask_fraction));
    }
    if !problems.is_empty() {
        return Err(Error::Spec(problems.join("; ")));
    }
    let root = SeededRng::new(cv.seed);
    let fold_of_row = fold_assignment(table.n_rows(), cv.folds, &mut root.substream(0));
    let mut mask_rng = root.substream(1);

    let mut rmse = vec![Vec::with_capacity(cv.folds); cv.candidates.len()];
    let mut synthetic_cells = Vec::with_capacity(cv.folds);
    for f in 0..cv.folds {
        let train_rows: Vec<usize> = (0..table.n_rows()).filter(|&i| fold_of_row[i] != f).collect();
        let val_rows: Vec<usize> = (0..table.n_rows()).filter(|&i| fold_of_row[i] == f).collect();
        let (train_table, _) = table.select_rows(&train_rows).drop_all_missing_rows();
        let val = table.select_rows(&val_rows);

        let mut observed: Vec<(usize, usize)> = (0..val.n_rows())
            .flat_map(|i| (0..p).map(move |j| (i, j)))
            .filter(|&(i, j)| val.mask[[i, j]])
            .collect();
        mask_rng.shuffle(&mut observed);
        let hide = ((cv.mask_fraction * observed.len() as f64).round() as usize)
            .max(1)
            .min(observed.len());
        let mut hidden = observed[..hide].to_vec();
        hidden.sort_unstable();
        let mut new_mask = val.mask.clone();
        for &(i, j) in &hidden {
            new_mask[[i, j]] = false;
        }
        let masked_val = val.with_mask(new_mask)?;

        for (c, &kappa1) in cv.candidates.iter().enumerate() {
            let mut mc = model.clone();
            mc.kappa1 = kappa1;
            let mut tc = train_config.clone();
            tc.seed = root.substream(2 + (f * cv.candidates.len() + c) as u64).next_u64();
            let fitted = train(&train_table, &mc, &tc)?;
            let ic = ImputeConfig {
                mode: ImputeMode::Mar,
                ..impute_config.clone()
            };
            let imputed = impute(&fitted.params, &masked_val, &ic)?;
            rmse[c].push(rmse_on_cells(val.values.view(), imputed.values.view(), &hidden)?);
        }
        synthetic_cells.push(hidden.into_iter().map(|(i, j)| (val_rows[i], j)).collect());
    }
    let mean_rmse: Vec<f64> = rmse.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let best = (0..mean_rmse.len())
        .min_by(|&a, &b| mean_rmse[a].total_cmp(&mean_rmse[b]))
        .unwrap();
    Ok(CvReport {
        candidates: cv.candidates.clone(),
        folds: cv.folds,
        fold_of_row,
        synthetic_cells,
        elbow_selected: elbow_select(&cv.candidates, &mean_rmse),
        selected: cv.candidates[best],
        rmse,
        mean_rmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rmse_examples() {
        let truth = array![[0.0, 1.0, 2.0]];
        let imputed = array![[0.0, 1.0, 0.0]];
        let mask = array![[true, true, false]];
        assert_eq!(imputation_rmse(truth.view(), imputed.view(), mask.view()).unwrap(), 2.0);
        assert_eq!(imputation_rmse(truth.view(), truth.view(), mask.view()).unwrap(), 0.0);
        let full = array![[true, true, true]];
        assert!(matches!(
            imputation_rmse(truth.view(), imputed.view(), full.view()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn rmse_ignores_observed_positions() {
        let truth = array![[0.0, 5.0], [1.0, 3.0]];
        let a = array![[9.0, 4.0], [-7.0, 3.5]];
        let b = array![[-2.0, 4.0], [100.0, 3.5]];
        let mask = array![[true, false], [true, false]];
        assert_eq!(
            imputation_rmse(truth.view(), a.view(), mask.view()).unwrap(),
            imputation_rmse(truth.view(), b.view(), mask.view()).unwrap()
        );
    }

    #[test]
    fn median_distance_small_case() {
        // pooled points 0, 1, 3 on a line: distances 1, 2, 3
        let a = array![[0.0], [1.0]];
        let b = array![[3.0]];
        assert_eq!(median_pairwise_distance(a.view(), b.view()), 2.0);
        // four points 0, 1, 3, 7: distances 1, 2, 3, 4, 6, 7 -> median of squares (9 + 16) / 2
        let b = array![[3.0], [7.0]];
        assert!((median_pairwise_distance(a.view(), b.view()) - 12.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn mmd_hand_computed() {
        // two points each side, unit bandwidth
        let a = array![[0.0], [1.0]];
        let b = array![[0.0], [2.0]];
        let k = |d: f64| (-0.5 * d * d).exp();
        let expect = k(1.0) + k(2.0) - 0.5 * (k(0.0) + k(2.0) + k(1.0) + k(1.0));
        let got = mmd_squared_with_bandwidth(a.view(), b.view(), 1.0).unwrap().mmd2;
        assert!((got - expect).abs() < 1e-15);
    }

    #[test]
    fn mmd_symmetric_and_degenerate() {
        let mut rng = SeededRng::new(1);
        let a = Array2::from_shape_fn((50, 2), |_| rng.normal());
        let b = Array2::from_shape_fn((40, 2), |_| rng.normal() + 0.5);
        let ab = mmd_squared(a.view(), b.view()).unwrap().mmd2;
        let ba = mmd_squared(b.view(), a.view()).unwrap().mmd2;
        assert!((ab - ba).abs() < 1e-12);
        assert!(mmd_squared(a.slice(ndarray::s![..1, ..]), b.view()).is_err());
    }

    #[test]
    fn mmd_separated_and_null() {
        let mut rng = SeededRng::new(2);
        let n = 2000;
        let a = Array2::from_shape_fn((n, 1), |_| rng.normal());
        let far = Array2::from_shape_fn((n, 1), |_| rng.normal() + 5.0);
        let same = Array2::from_shape_fn((n, 1), |_| rng.normal());
        assert!(mmd_squared(a.view(), far.view()).unwrap().mmd2 > 0.1);
        assert!(mmd_squared(a.view(), same.view()).unwrap().mmd2.abs() < 0.005);
    }

    #[test]
    fn bootstrap_constant_and_errors() {
        let est = mean_estimate_with_ci(&[3.5; 40], 200, 1).unwrap();
        assert_eq!((est.estimate, est.lower, est.upper), (3.5, 3.5, 3.5));
        assert!(mean_estimate_with_ci(&[], 200, 1).is_err());
        assert!(mean_estimate_with_ci(&[1.0], 99, 1).is_err());
    }

    #[test]
    fn bootstrap_interval_brackets_and_narrows() {
        let mut rng = SeededRng::new(3);
        let big: Vec<f64> = (0..4000).map(|_| rng.normal()).collect();
        let small = &big[..250];
        let a = mean_estimate_with_ci(&big, 1000, 4).unwrap();
        let b = mean_estimate_with_ci(small, 1000, 4).unwrap();
        assert!(a.lower <= a.estimate && a.estimate <= a.upper);
        assert!(b.upper - b.lower > a.upper - a.lower);
        // normal theory width 2·1.96/√n
        let w = a.upper - a.lower;
        assert!((w / (3.92 / 4000f64.sqrt()) - 1.0).abs() < 0.15, "{w}");
    }

    #[test]
    fn quantile_interpolates() {
        let s = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.5), 2.0);
        assert_eq!(quantile_sorted(&s, 0.125), 0.5);
    }

    #[test]
    fn elbow_rule() {
        assert_eq!(elbow_select(&[1, 2, 3, 4, 5, 6], &[1.0, 0.6, 0.3, 0.28, 0.27, 0.26]), 3);
        assert_eq!(elbow_select(&[1, 3], &[0.9, 0.5]), 3);
    }

    #[test]
    fn folds_partition_rows() {
        let f = fold_assignment(103, 5, &mut SeededRng::new(1));
        let mut counts = [0; 5];
        for &x in &f {
            counts[x] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), 103);
        assert!(counts.iter().all(|&c| c == 20 || c == 21));
    }
}
