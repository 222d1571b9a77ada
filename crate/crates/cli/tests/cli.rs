use std::path::Path;
use std::process::{Command, Output};

fn imiwae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imiwae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr)
        .unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr)))
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn lists_presets() {
    let out = imiwae(&["presets"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["table1-linear-latent", "mixture-mean", "theory-all"] {
        assert!(text.lines().any(|l| l == name), "{text}");
    }
}

#[test]
fn bad_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    write(
        &cfg,
        r#"{"kind": "simulate-impute", "replications": 0, "train": {"batch_size": 0}, "typo": true}"#,
    );
    let out = imiwae(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    let problems = err["problems"].as_array().unwrap();
    assert!(problems.len() >= 5, "{problems:?}");
}

#[test]
fn missing_file_is_a_structured_error() {
    let out = imiwae(&["run", "/definitely/not/here.json"]);
    assert!(!out.status.success());
    assert_eq!(stderr_json(&out)["error"], "config");
}

#[test]
fn worker_variable_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_imiwae"))
        .arg("presets")
        .env("IMIWAE_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let ok = Command::new(env!("CARGO_BIN_EXE_imiwae"))
        .arg("presets")
        .env("IMIWAE_WORKERS", "1")
        .output()
        .unwrap();
    assert!(ok.status.success());
}

#[test]
fn run_then_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.json");
    let out_dir = dir.path().join("run");
    write(
        &cfg,
        &serde_json::json!({
            "kind": "simulate-impute",
            "replications": 2,
            "output_dir": out_dir,
            "data": {"generator": "latent_factor", "n": 150, "p": 3, "latent_dim": 2},
            "missingness": {"mechanism": "latent", "target_missing_rate": [0.3, 0.4]},
            "model": {"kappa1": 2, "hidden_width": 6, "k": 4},
            "train": {"max_epochs": 2},
            "impute": {"b": 50},
            "eval": {"mmd_max_per_side": 100}
        })
        .to_string(),
    );
    let out = imiwae(&["run", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = out_dir.join("report.json");
    assert!(report.exists());
    let csv_out = dir.path().join("pooled.csv");
    let agg = imiwae(&[
        "aggregate",
        report.to_str().unwrap(),
        report.to_str().unwrap(),
        "--out",
        csv_out.to_str().unwrap(),
    ]);
    assert!(agg.status.success());
    let text = std::fs::read_to_string(csv_out).unwrap();
    assert!(text.lines().any(|l| l.starts_with("rmse,4,")), "{text}");

    let empty = imiwae(&["aggregate"]);
    assert!(!empty.status.success());
}

#[test]
fn aggregate_rejects_mixed_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let mk = |kind: &str, name: &str| {
        let p = dir.path().join(name);
        write(
            &p,
            &serde_json::json!({
                "kind": kind, "name": "x", "software_version": "0", "config": null,
                "replications": [], "aggregates": {}, "wall_seconds": 0.0
            })
            .to_string(),
        );
        p
    };
    let a = mk("theory", "a.json");
    let b = mk("mixture-mean", "b.json");
    let out = imiwae(&["aggregate", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "aggregate");
}

#[test]
fn train_impute_generate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    let mut text = String::from("x,y,z\n");
    for i in 0..60 {
        let t = i as f64 / 10.0;
        if i % 7 == 3 {
            text.push_str(&format!("{},NA,{}\n", t.sin(), t.cos()));
        } else {
            text.push_str(&format!("{},{},{}\n", t.sin(), t, t.cos()));
        }
    }
    write(&data, &text);
    let model = dir.path().join("model.json");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let out = imiwae(&[
        "train",
        "--data",
        &s(&data),
        "--out",
        &s(&model),
        "--kappa1",
        "2",
        "--hidden-width",
        "6",
        "--k",
        "4",
        "--epochs",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let imputed = dir.path().join("imputed.csv");
    for mode in ["mnar", "mar"] {
        let out = imiwae(&[
            "impute",
            "--model",
            &s(&model),
            "--data",
            &s(&data),
            "--out",
            &s(&imputed),
            "--mode",
            mode,
            "--B",
            "64",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let back = std::fs::read_to_string(&imputed).unwrap();
        assert!(back.starts_with("x,y,z\n"), "{back}");
        assert!(!back.contains("NA") && !back.contains("NaN"));
        assert_eq!(back.lines().count(), 61);
    }

    let gen = dir.path().join("gen.csv");
    let out = imiwae(&["generate", "--model", &s(&model), "--n", "10", "--out", &s(&gen)]);
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(&gen).unwrap().lines().count(), 11);

    let cv = imiwae(&[
        "cv",
        "--data",
        &s(&data),
        "--kappa1",
        "1,2",
        "--folds",
        "2",
        "--hidden-width",
        "4",
        "--epochs",
        "2",
        "--B",
        "20",
    ]);
    assert!(cv.status.success(), "{}", String::from_utf8_lossy(&cv.stderr));
    let report: serde_json::Value = serde_json::from_slice(&cv.stdout).unwrap();
    assert_eq!(report["candidates"], serde_json::json!([1, 2]));
}

#[test]
fn impute_with_a_corrupt_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    write(&model, "{\"format_version\": 99}");
    let data = dir.path().join("d.csv");
    write(&data, "1,2\n3,NA\n");
    let out = imiwae(&[
        "impute",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("o.csv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "input");
}

#[test]
fn unknown_theory_check() {
    let out = imiwae(&["verify-theory", "--check", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn lemma1_check_from_the_command_line() {
    let out = imiwae(&["verify-theory", "--check", "lemma1"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["lemma1"]["passed"], true);
    assert!(report["monotone"].is_null());
}
