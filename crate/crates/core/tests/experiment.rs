use std::collections::BTreeMap;

use imiwae::experiment::{
    aggregate, aggregate_reports, run, run_and_save, run_one, ExperimentConfig, ReplicationRecord, ReplicationSeeds,
    RunReport,
};
use imiwae::Error;
use serde_json::{json, Value};

fn tiny_simulation() -> Value {
    json!({
        "kind": "simulate-impute",
        "name": "tiny",
        "replications": 2,
        "base_seed": 11,
        "data": {"generator": "latent_factor", "n": 300, "p": 3, "latent_dim": 2},
        "missingness": {"mechanism": "latent", "target_missing_rate": [0.3, 0.4]},
        "model": {"kappa1": 2, "hidden_width": 8, "k": 5},
        "train": {"max_epochs": 5, "early_stopping": false},
        "impute": {"b": 200},
        "eval": {"mmd_max_per_side": 200}
    })
}

fn config(v: Value) -> ExperimentConfig {
    ExperimentConfig::from_value(&v).unwrap()
}

#[test]
fn simulation_reports_every_metric() {
    let report = run(&config(tiny_simulation())).unwrap();
    assert_eq!(report.kind, "simulate-impute");
    assert_eq!(report.replications.len(), 2);
    for name in [
        "rmse",
        "rmse_original_scale",
        "rmse_mean_imputation",
        "rmse_untrained",
        "mmd_generated",
        "mmd_observed_complete_rows",
        "mmd_null",
        "missing_rate",
        "epochs",
    ] {
        let v = report.metric(name);
        assert_eq!(v.len(), 2, "{name}");
        assert!(v.iter().all(|x| x.is_finite()), "{name}: {v:?}");
    }
    for r in report.metric("missing_rate") {
        assert!((0.25..=0.45).contains(&r), "{r}");
    }
    assert_eq!(report.metric("epochs"), vec![5.0, 5.0]);
    assert_eq!(report.config["train"]["batch_size"], 16);
}

#[test]
fn reruns_are_bit_identical_and_replications_stand_alone() {
    let c = config(tiny_simulation());
    let a = run(&c).unwrap();
    let b = run(&c).unwrap();
    let strip = |r: &RunReport| {
        r.replications
            .iter()
            .map(|x| (x.seeds, x.metrics.clone()))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&a), strip(&b));
    // A lone replication reproduces its slot in the full run.
    let one = run_one(&c, 1).unwrap();
    assert_eq!(one.metrics, a.replications[1].metrics);
    assert_eq!(one.seeds, ReplicationSeeds::derive(11, 1));
}

#[test]
fn mixture_pipeline_runs() {
    let report = run(&config(json!({
        "kind": "mixture-mean",
        "data": {"generator": "gaussian_mixture", "n": 400},
        "model": {"kappa1": 3, "hidden_width": 8, "hidden_layers": 1, "k": 5},
        "train": {"max_epochs": 3},
        "impute": {"b": 100},
        "eval": {"bootstrap_reps": 100}
    })))
    .unwrap();
    let m = &report.replications[0].metrics;
    let truth = m["truth"];
    assert!(truth.is_finite());
    assert!(m["imputed_ci_lower"] <= m["imputed_mean"] && m["imputed_mean"] <= m["imputed_ci_upper"]);
    assert_eq!(m["complete_case_abs_error"], (m["complete_case_mean"] - truth).abs());
    assert!(m["rows_dropped"] > 0.0);
}

#[test]
fn cv_and_theory_kinds_run() {
    let cv = run(&config(json!({
        "kind": "cv-select",
        "data": {"generator": "latent_factor", "n": 120, "p": 4, "latent_dim": 2},
        "model": {"kappa1": 2, "hidden_width": 8, "k": 3},
        "train": {"max_epochs": 2},
        "impute": {"b": 50},
        "cv": {"candidates": [1, 2], "folds": 2}
    })))
    .unwrap();
    let m = &cv.replications[0].metrics;
    assert!(m.contains_key("cv_rmse_kappa1_1") && m.contains_key("cv_rmse_kappa1_2"));
    assert!([1.0, 2.0].contains(&m["selected"]));

    let th = run(&config(json!({
        "kind": "theory",
        "theory": {
            "monotone_ks": [1, 10], "monotone_reps": 2000,
            "bias_ks": [100], "bias_reps": 1000, "bias_tolerance": 1.0,
            "convergence_ks": [10, 100], "convergence_trials": [1000, 1000],
            "lemma1_trials": 6, "lemma1_grid": 1000
        }
    })))
    .unwrap();
    let m = &th.replications[0].metrics;
    assert_eq!(m["lemma1_passed"], 1.0);
    assert!(m["lemma1_worst_exact"] < 1e-12);
    assert!(th.replications[0].details["lemma1"].is_object());
}

#[test]
fn saved_model_imputes_and_generates_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    std::fs::write(
        &data,
        "a,b,c\n1.0,2.0,NA\n0.5,NA,1.5\n2.0,1.0,0.0\n1.5,0.5,1.0\nNA,1.0,2.0\n",
    )
    .unwrap();
    let mut model = imiwae::model::ModelConfig::new(3, 2);
    model.hidden_width = 4;
    model.k = 3;
    let train = imiwae::train::TrainConfig {
        max_epochs: 2,
        ..Default::default()
    };
    let (ckpt, _) = imiwae::experiment::fit_csv(&data, "NA", &model, &train).unwrap();
    let model_path = dir.path().join("model.json");
    ckpt.save(&model_path).unwrap();
    assert!(imiwae::model::Checkpoint::load(&model_path)
        .unwrap()
        .standardization
        .is_some());

    let out = dir.path().join("out");
    let report = run_and_save(&config(json!({
        "kind": "impute-csv",
        "data": {"generator": "csv", "path": data, "missing_token": "NA"},
        "model_path": model_path,
        "output_dir": out,
        "impute": {"b": 50}
    })))
    .unwrap();
    assert_eq!(report.replications[0].metrics["missing_cells"], 3.0);
    let imputed = imiwae::data::load_csv(out.join("imputed.csv"), "NA").unwrap().table;
    assert!(imputed.is_complete());
    assert_eq!(imputed.values[[0, 0]], 1.0);
    assert_eq!(imputed.values[[1, 2]], 1.5);
    assert!(out.join("report.json").exists() && out.join("summary.csv").exists());

    let gen = run_and_save(&config(json!({
        "kind": "generate",
        "model_path": model_path,
        "output_dir": dir.path().join("gen"),
        "eval": {"generated_rows": 25}
    })))
    .unwrap();
    assert_eq!(gen.replications[0].metrics["rows"], 25.0);
    let g = imiwae::data::load_csv(dir.path().join("gen/generated.csv"), "NA")
        .unwrap()
        .table;
    assert_eq!(g.n_rows(), 25);
}

fn fake_report(kind: &str, values: &[f64]) -> RunReport {
    let records: Vec<ReplicationRecord> = values
        .iter()
        .enumerate()
        .map(|(i, &v)| ReplicationRecord {
            index: i,
            seeds: ReplicationSeeds::derive(0, i),
            metrics: BTreeMap::from([("rmse".to_string(), v)]),
            wall_seconds: 0.0,
            details: Value::Null,
        })
        .collect();
    RunReport {
        kind: kind.into(),
        name: "fake".into(),
        software_version: "0".into(),
        config: Value::Null,
        aggregates: RunReport::summarize(&records),
        replications: records,
        wall_seconds: 0.0,
    }
}

#[test]
fn aggregation_pools_reports() {
    let a: Vec<f64> = (0..25).map(|i| (i as f64).sin()).collect();
    let b: Vec<f64> = (0..25).map(|i| 1.0 + (i as f64 * 0.37).cos()).collect();
    let single = aggregate_reports(&[fake_report("x", &a)]).unwrap();
    assert_eq!(single.rows["rmse"], fake_report("x", &a).aggregates["rmse"]);

    let pooled = aggregate_reports(&[fake_report("x", &a), fake_report("x", &b)]).unwrap();
    let all: Vec<f64> = a.iter().chain(&b).copied().collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let sd = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let r = pooled.rows["rmse"];
    assert_eq!(r.n, 50);
    assert!((r.mean - mean).abs() < 1e-13);
    assert!((r.sd - sd).abs() < 1e-13);
    assert!(pooled.to_csv().unwrap().starts_with("metric,n,mean,sd\nrmse,50,"));

    assert!(matches!(aggregate_reports(&[]), Err(Error::Aggregate(_))));
    assert!(matches!(
        aggregate_reports(&[fake_report("x", &a), fake_report("y", &b)]),
        Err(Error::Aggregate(_))
    ));
}

#[test]
fn aggregation_reads_files() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.json");
    let p2 = dir.path().join("b.json");
    fake_report("x", &[1.0, 2.0]).save(&p1).unwrap();
    fake_report("x", &[3.0]).save(&p2).unwrap();
    let t = aggregate(&[p1, p2]).unwrap();
    assert_eq!(t.rows["rmse"].n, 3);
    assert_eq!(t.rows["rmse"].mean, 2.0);
    let none: [&str; 0] = [];
    assert!(aggregate(&none).is_err());
}
