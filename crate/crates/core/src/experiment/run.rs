//! One replication of each experiment kind. Every random choice flows from
//! the replication's [`ReplicationSeeds`], so a record can be rebuilt from
//! the resolved config and its seeds alone.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::RngCore;
use serde_json::{json, Value};

use super::config::{DataSource, ExperimentConfig, ExperimentKind};
use super::report::ReplicationSeeds;
use crate::data::{load_csv, standardize, write_csv, DataTable, Standardization};
use crate::datagen::{
    factor_maps, gen_gaussian_mixture, sample_latent_factor, FactorMaps, GaussianMixtureSpec, LatentFactorSpec,
};
use crate::error::{Error, Result};
use crate::eval::{cross_validate_kappa1, imputation_rmse, mean_estimate_with_ci, mmd_squared_subsampled, CvConfig};
use crate::impute::{generate, impute, ImputeConfig};
use crate::missingness::simulate_missingness;
use crate::model::{Checkpoint, ModelConfig};
use crate::rng::SeededRng;
use crate::theory::{run_all, TheoryConfig};
use crate::train::{initial_params, train, TrainConfig, TrainOutcome};

pub(crate) type Metrics = BTreeMap<String, f64>;

/// Independent seeds for the sub-steps of one stage.
fn sub_seed(seed: u64, i: u64) -> u64 {
    SeededRng::new(seed).substream(i).next_u64()
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

pub(crate) fn run_replication(
    config: &ExperimentConfig,
    index: usize,
    seeds: &ReplicationSeeds,
) -> Result<(Metrics, Value)> {
    match config.kind {
        ExperimentKind::SimulateImpute => simulate_impute(config, seeds),
        ExperimentKind::MixtureMean => mixture_mean(config, seeds),
        ExperimentKind::CvSelect => cv_select(config, seeds),
        ExperimentKind::Theory => theory(config, index),
        ExperimentKind::ImputeCsv => impute_csv(config, index, seeds),
        ExperimentKind::Generate => generate_rows(config, index, seeds),
    }
}

fn model_config(config: &ExperimentConfig, p: usize) -> Result<ModelConfig> {
    let Some(mc) = config.model.clone() else {
        return Err(Error::Config(vec![format!(
            "model: required for {}",
            config.kind.as_str()
        )]));
    };
    if mc.p != p {
        return Err(Error::Shape(format!("model.p = {} but the data has {p} columns", mc.p)));
    }
    Ok(mc)
}

fn train_config(config: &ExperimentConfig, seeds: &ReplicationSeeds) -> TrainConfig {
    TrainConfig {
        seed: seeds.train,
        ..config.train.clone()
    }
}

fn impute_config(config: &ExperimentConfig, seeds: &ReplicationSeeds) -> ImputeConfig {
    ImputeConfig {
        seed: seeds.impute,
        ..config.impute.clone()
    }
}

fn training_metrics(m: &mut Metrics, fitted: &TrainOutcome) {
    m.insert("epochs".into(), fitted.trace.epochs() as f64);
    m.insert(
        "final_objective".into(),
        fitted.trace.epoch_objective.last().copied().unwrap_or(f64::NAN),
    );
    m.insert("stopped_early".into(), flag(fitted.trace.stopped_early));
    m.insert("gamma".into(), fitted.params.gamma());
}

/// A latent-factor source together with its maps, so that fresh draws
/// from the same distribution are available.
struct Truth {
    table: DataTable,
    factor: Option<(LatentFactorSpec, FactorMaps)>,
}

fn load_truth(source: &DataSource, seed: u64) -> Result<Truth> {
    match source {
        DataSource::LatentFactor {
            n,
            p,
            latent_dim,
            noise_std,
            hidden_width,
        } => {
            let spec = LatentFactorSpec {
                n: *n,
                p: *p,
                latent_dim: *latent_dim,
                noise_std: *noise_std,
                hidden_width: *hidden_width,
                seed,
            };
            let maps = factor_maps(&spec);
            let table = sample_latent_factor(&spec, &maps)?.table;
            Ok(Truth {
                table,
                factor: Some((spec, maps)),
            })
        }
        DataSource::Csv { path, missing_token } => Ok(Truth {
            table: load_csv(path, missing_token)?.table,
            factor: None,
        }),
        DataSource::GaussianMixture { .. } => Err(Error::Spec("the mixture source carries its own mask".into())),
    }
}

/// Complete data, standardized, then masked by the configured mechanism;
/// trains on the masked rows and scores imputations against the truth.
fn simulate_impute(config: &ExperimentConfig, seeds: &ReplicationSeeds) -> Result<(Metrics, Value)> {
    let source = config.data.as_ref().expect("validated");
    let truth = load_truth(source, seeds.data)?;
    if !truth.table.is_complete() {
        return Err(Error::Spec("simulate-impute needs fully observed data".into()));
    }
    // Statistics of the complete table, as if standardized before the
    // missing values appeared.
    let (complete, stats) = standardize(&truth.table)?;
    let mut mspec = config.missingness.clone().expect("validated");
    mspec.seed = seeds.missingness;
    let outcome = simulate_missingness(&complete, &mspec)?;

    let keep: Vec<usize> = (0..complete.n_rows())
        .filter(|&i| !outcome.table.row_all_missing(i))
        .collect();
    let masked = outcome.table.select_rows(&keep);
    let truth_kept = complete.select_rows(&keep);
    let mc = model_config(config, complete.n_cols())?;
    let tc = train_config(config, seeds);
    let fitted = train(&masked, &mc, &tc)?;
    let ic = impute_config(config, seeds);
    let imputed = impute(&fitted.params, &masked, &ic)?;

    let mut m = Metrics::new();
    m.insert("missing_rate".into(), outcome.missing_rate);
    m.insert("offset".into(), outcome.offset.unwrap_or(f64::NAN));
    m.insert("rows_dropped".into(), (complete.n_rows() - keep.len()) as f64);
    m.insert("complete_rows".into(), masked.complete_rows().len() as f64);
    training_metrics(&mut m, &fitted);

    let rmse = imputation_rmse(truth_kept.values.view(), imputed.values.view(), masked.mask.view())?;
    m.insert("rmse".into(), rmse);
    let mut truth_orig = truth_kept.values.clone();
    stats.invert_values(&mut truth_orig);
    let mut imputed_orig = imputed.values.clone();
    stats.invert_values(&mut imputed_orig);
    m.insert(
        "rmse_original_scale".into(),
        imputation_rmse(truth_orig.view(), imputed_orig.view(), masked.mask.view())?,
    );
    m.insert(
        "mean_ess".into(),
        imputed.ess.iter().sum::<f64>() / imputed.ess.len() as f64,
    );

    let col_means: Vec<f64> = (0..masked.n_cols()).map(|j| masked.observed_column_mean(j)).collect();
    let mean_filled = Array2::from_shape_fn(masked.values.dim(), |(i, j)| {
        if masked.mask[[i, j]] {
            masked.values[[i, j]]
        } else {
            col_means[j]
        }
    });
    let rmse_mean = imputation_rmse(truth_kept.values.view(), mean_filled.view(), masked.mask.view())?;
    m.insert("rmse_mean_imputation".into(), rmse_mean);
    m.insert("beats_mean_imputation".into(), flag(rmse < rmse_mean));

    if config.eval.untrained_baseline {
        let init = initial_params(&mc, tc.seed)?;
        let untrained = impute(&init, &masked, &ic)?;
        let r = imputation_rmse(truth_kept.values.view(), untrained.values.view(), masked.mask.view())?;
        m.insert("rmse_untrained".into(), r);
        m.insert("beats_untrained".into(), flag(rmse < r));
    }

    // MMD against an independent draw of the ground truth when one can be
    // made; otherwise against the data itself.
    let side = config.eval.mmd_max_per_side;
    let reference = match &truth.factor {
        Some((spec, maps)) => {
            let fresh_spec = LatentFactorSpec {
                n: spec.n.min(side),
                seed: sub_seed(seeds.eval, 0),
                ..spec.clone()
            };
            stats.apply(&sample_latent_factor(&fresh_spec, maps)?.table)
        }
        None => complete.clone(),
    };
    let n_gen = config.eval.generated_rows.unwrap_or(complete.n_rows());
    let generated = generate(&fitted.params, n_gen, sub_seed(seeds.eval, 1))?;
    let mmd_gen = mmd_squared_subsampled(
        generated.values.view(),
        reference.values.view(),
        side,
        sub_seed(seeds.eval, 2),
    )?;
    m.insert("mmd_generated".into(), mmd_gen.mmd2);
    m.insert("mmd_bandwidth".into(), mmd_gen.bandwidth);
    let complete_rows = masked.select_rows(&masked.complete_rows());
    if complete_rows.n_rows() >= 2 {
        let mmd_obs = mmd_squared_subsampled(
            complete_rows.values.view(),
            reference.values.view(),
            side,
            sub_seed(seeds.eval, 3),
        )?;
        m.insert("mmd_observed_complete_rows".into(), mmd_obs.mmd2);
        m.insert(
            "generated_closer_than_observed".into(),
            flag(mmd_gen.mmd2 < mmd_obs.mmd2),
        );
    }
    if config.eval.mmd_null && truth.factor.is_some() {
        let null = mmd_squared_subsampled(
            complete.values.view(),
            reference.values.view(),
            side,
            sub_seed(seeds.eval, 4),
        )?;
        m.insert("mmd_null".into(), null.mmd2);
    }
    let details = json!({
        "standardization": stats,
        "epoch_objective": fitted.trace.epoch_objective,
    });
    Ok((m, details))
}

/// Mean of one column estimated from imputed and generated data, against
/// the closed-form mixture mean and the naive estimators.
fn mixture_mean(config: &ExperimentConfig, seeds: &ReplicationSeeds) -> Result<(Metrics, Value)> {
    let Some(DataSource::GaussianMixture { n }) = config.data else {
        return Err(Error::Spec("mixture-mean needs the gaussian_mixture source".into()));
    };
    let spec = GaussianMixtureSpec::reference(n, seeds.data);
    let t = config.eval.target_column;
    let truth = spec.true_mean()[t];
    let sample = gen_gaussian_mixture(&spec)?;
    let table = sample.table.hide_missing();
    let (scaled, stats) = standardize(&table)?;
    let (train_table, dropped) = scaled.drop_all_missing_rows();

    let mc = model_config(config, 3)?;
    let fitted = train(&train_table, &mc, &train_config(config, seeds))?;
    let mut imputed = impute(&fitted.params, &scaled, &impute_config(config, seeds))?.values;
    stats.invert_values(&mut imputed);
    let reps = config.eval.bootstrap_reps;
    let col: Vec<f64> = imputed.column(t).to_vec();
    let est = mean_estimate_with_ci(&col, reps, sub_seed(seeds.eval, 0))?;

    let n_gen = config.eval.generated_rows.unwrap_or(n);
    let mut generated = generate(&fitted.params, n_gen, sub_seed(seeds.eval, 1))?.values;
    stats.invert_values(&mut generated);
    let gen_est = mean_estimate_with_ci(&generated.column(t).to_vec(), reps, sub_seed(seeds.eval, 2))?;

    let complete: Vec<f64> = (0..n)
        .filter(|&i| table.row_complete(i))
        .map(|i| table.values[[i, t]])
        .collect();
    let available: Vec<f64> = (0..n)
        .filter(|&i| table.mask[[i, t]])
        .map(|i| table.values[[i, t]])
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let cc = mean(&complete);
    let ac = mean(&available);

    let mut m = Metrics::new();
    m.insert("truth".into(), truth);
    m.insert("imputed_mean".into(), est.estimate);
    m.insert("imputed_ci_lower".into(), est.lower);
    m.insert("imputed_ci_upper".into(), est.upper);
    m.insert("imputed_abs_error".into(), (est.estimate - truth).abs());
    m.insert("imputed_ci_covers_truth".into(), flag(est.covers(truth)));
    m.insert("generated_mean".into(), gen_est.estimate);
    m.insert("generated_ci_lower".into(), gen_est.lower);
    m.insert("generated_ci_upper".into(), gen_est.upper);
    m.insert("generated_abs_error".into(), (gen_est.estimate - truth).abs());
    m.insert("generated_ci_covers_truth".into(), flag(gen_est.covers(truth)));
    m.insert("complete_case_mean".into(), cc);
    m.insert("complete_case_abs_error".into(), (cc - truth).abs());
    m.insert("available_case_mean".into(), ac);
    m.insert("available_case_abs_error".into(), (ac - truth).abs());
    m.insert(
        "imputed_beats_complete_case".into(),
        flag((est.estimate - truth).abs() < (cc - truth).abs()),
    );
    m.insert("rows_dropped".into(), dropped as f64);
    m.insert("missing_rate".into(), table.missing_rate());
    training_metrics(&mut m, &fitted);
    // The listed pattern probabilities are rounded; this is what they summed to.
    let (_, listed_total) = GaussianMixtureSpec::reference_raw(n, seeds.data).renormalized();
    let details = json!({
        "standardization": stats,
        "pattern_probability_total": listed_total,
        "epoch_objective": fitted.trace.epoch_objective,
    });
    Ok((m, details))
}

fn cv_select(config: &ExperimentConfig, seeds: &ReplicationSeeds) -> Result<(Metrics, Value)> {
    let source = config.data.as_ref().expect("validated");
    let truth = load_truth(source, seeds.data)?;
    let table = match (&config.missingness, truth.table.is_complete()) {
        (Some(spec), true) => {
            let (complete, _) = standardize(&truth.table)?;
            let mut spec = spec.clone();
            spec.seed = seeds.missingness;
            let masked = simulate_missingness(&complete, &spec)?.table;
            masked.drop_all_missing_rows().0
        }
        _ => standardize(&truth.table)?.0.drop_all_missing_rows().0,
    };
    let mc = model_config(config, table.n_cols())?;
    let cv = CvConfig {
        candidates: config.cv.candidates.clone(),
        folds: config.cv.folds,
        mask_fraction: config.cv.mask_fraction,
        seed: seeds.train,
    };
    let report = cross_validate_kappa1(&table, &cv, &mc, &config.train, &impute_config(config, seeds))?;
    let mut m = Metrics::new();
    for (c, r) in report.candidates.iter().zip(&report.mean_rmse) {
        m.insert(format!("cv_rmse_kappa1_{c}"), *r);
    }
    m.insert("selected".into(), report.selected as f64);
    m.insert("elbow_selected".into(), report.elbow_selected as f64);
    let details = json!({
        "candidates": report.candidates,
        "rmse": report.rmse,
        "mean_rmse": report.mean_rmse,
    });
    Ok((m, details))
}

fn theory(config: &ExperimentConfig, index: usize) -> Result<(Metrics, Value)> {
    let tc = TheoryConfig {
        seed: config.theory.seed.wrapping_add(index as u64),
        ..config.theory.clone()
    };
    let report = run_all(&tc)?;
    let mut m = Metrics::new();
    m.insert("passed".into(), flag(report.passed()));
    if let Some(r) = &report.monotone {
        m.insert("monotone_passed".into(), flag(r.passed));
        m.insert("monotone_log_mean".into(), r.log_mean);
        for (k, e) in r.ks.iter().zip(&r.estimates) {
            m.insert(format!("monotone_l_k{k}"), *e);
        }
    }
    if let Some(r) = &report.bias_variance {
        m.insert("bias_variance_passed".into(), flag(r.passed));
        for row in &r.rows {
            m.insert(format!("k_bias_k{}", row.k), row.k_bias);
            m.insert(format!("k_variance_k{}", row.k), row.k_variance);
        }
    }
    if let Some(r) = &report.convergence {
        m.insert("convergence_passed".into(), flag(r.passed));
        for (k, e) in r.ks.iter().zip(&r.exceedance) {
            m.insert(format!("exceedance_k{k}"), *e);
        }
    }
    if let Some(r) = &report.lemma1 {
        m.insert("lemma1_passed".into(), flag(r.passed));
        m.insert("lemma1_worst_exact".into(), r.worst_exact);
        m.insert("lemma1_worst_grid".into(), r.worst_grid);
    }
    Ok((m, serde_json::to_value(&report)?))
}

fn checkpoint(config: &ExperimentConfig) -> Result<Checkpoint> {
    Checkpoint::load(config.model_path.as_ref().expect("validated"))
}

/// Output file for replication `index`, suffixed when there are several.
fn output_file(config: &ExperimentConfig, stem: &str, index: usize) -> Option<std::path::PathBuf> {
    let dir = config.output_dir.as_ref()?;
    Some(if config.replications > 1 {
        dir.join(format!("{stem}_{index}.csv"))
    } else {
        dir.join(format!("{stem}.csv"))
    })
}

/// Imputes a CSV with a saved model, on the model's standardized scale
/// when the checkpoint carries the statistics.
pub fn impute_table(ckpt: &Checkpoint, table: &DataTable, config: &ImputeConfig) -> Result<(DataTable, Vec<f64>)> {
    let scaled = match &ckpt.standardization {
        Some(s) => s.apply(table),
        None => table.clone(),
    };
    let imputed = impute(&ckpt.params, &scaled, config)?;
    let mut out = imputed.to_table();
    if let Some(s) = &ckpt.standardization {
        s.invert_values(&mut out.values);
    }
    // Observed cells are copied back untouched, free of round-off.
    for ((v, &obs), &orig) in out.values.iter_mut().zip(table.mask.iter()).zip(table.values.iter()) {
        if obs {
            *v = orig;
        }
    }
    out.column_names = table.column_names.clone();
    Ok((out, imputed.ess))
}

fn impute_csv(config: &ExperimentConfig, index: usize, seeds: &ReplicationSeeds) -> Result<(Metrics, Value)> {
    let ckpt = checkpoint(config)?;
    let Some(DataSource::Csv { path, missing_token }) = &config.data else {
        return Err(Error::Spec("impute-csv needs a csv data source".into()));
    };
    let load = load_csv(path, missing_token)?;
    let (out, ess) = impute_table(&ckpt, &load.table, &impute_config(config, seeds))?;
    let mut m = Metrics::new();
    m.insert("rows".into(), out.n_rows() as f64);
    m.insert("rows_dropped".into(), load.dropped_all_missing as f64);
    m.insert(
        "missing_cells".into(),
        load.table.mask.iter().filter(|&&o| !o).count() as f64,
    );
    m.insert("mean_ess".into(), ess.iter().sum::<f64>() / ess.len().max(1) as f64);
    let low = ess.iter().filter(|&&e| e < 0.01 * config.impute.b as f64).count();
    m.insert("low_ess_rows".into(), low as f64);
    let mut details = json!({});
    if let Some(file) = output_file(config, "imputed", index) {
        write_csv(&out, &file)?;
        details = json!({ "output": file });
    }
    Ok((m, details))
}

/// Synthetic rows from a saved model, on the original scale when the
/// checkpoint has the statistics.
pub fn generate_table(ckpt: &Checkpoint, n: usize, seed: u64) -> Result<DataTable> {
    let mut out = generate(&ckpt.params, n, seed)?;
    if let Some(s) = &ckpt.standardization {
        s.invert_values(&mut out.values);
    }
    out.column_names = ckpt.column_names.clone();
    Ok(out)
}

fn generate_rows(config: &ExperimentConfig, index: usize, seeds: &ReplicationSeeds) -> Result<(Metrics, Value)> {
    let ckpt = checkpoint(config)?;
    let n = config.eval.generated_rows.unwrap_or(1000);
    let out = generate_table(&ckpt, n, seeds.eval)?;
    let mut m = Metrics::new();
    m.insert("rows".into(), n as f64);
    for (j, mean) in out.values.mean_axis(Axis(0)).expect("n >= 1").iter().enumerate() {
        m.insert(format!("column_mean_{j}"), *mean);
    }
    let mut details = json!({});
    if let Some(file) = output_file(config, "generated", index) {
        write_csv(&out, &file)?;
        details = json!({ "output": file });
    }
    Ok((m, details))
}

/// Standardizes a table on its observed entries, trains on its rows that
/// are not fully missing, and packages the result with the statistics.
pub fn fit_table(
    table: &DataTable,
    model: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(Checkpoint, TrainOutcome)> {
    let (scaled, stats): (DataTable, Standardization) = standardize(table)?;
    let (rows, _) = scaled.drop_all_missing_rows();
    let fitted = train(&rows, model, train_config)?;
    let mut ckpt = Checkpoint::new(fitted.params.clone());
    ckpt.standardization = Some(stats);
    ckpt.column_names = table.column_names.clone();
    Ok((ckpt, fitted))
}

/// Convenience for callers holding a CSV path.
pub fn fit_csv(
    path: impl AsRef<Path>,
    missing_token: &str,
    model: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(Checkpoint, TrainOutcome)> {
    fit_table(&load_csv(path, missing_token)?.table, model, train_config)
}
