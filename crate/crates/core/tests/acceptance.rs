//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `IMIWAE_ACCEPTANCE=1,2,5` restricts the run to the listed criteria
//! (the others print SKIP). Run reports land in the cargo target tmpdir.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use imiwae::experiment::{preset, run, run_one, ReplicationRecord, RunReport};
use imiwae::missingness::Linearity;
use imiwae::model::{BatchNoise, ModelConfig, ModelParams};
use imiwae::nn::gradcheck::{central_difference, relative_error, FD_STEP};
use imiwae::nn::ParamTensors;
use imiwae::rng::SeededRng;
use imiwae::theory::{run_check, TheoryConfig, TheoryReport, CHECK_NAMES};
use ndarray::Array2;

/// Lognormal(0, 0.5) weights: log μ = σ²/2, μ₂/μ² = e^{σ²} - 1.
const SIGMA: f64 = 0.5;
/// Full-scale MMD² reference for the linear latent setting, printed alongside.
const REFERENCE_MMD: f64 = 0.0086;
/// Closed-form `E[X₃]` of the reference mixture, computed by hand from its
/// component means and pattern probabilities.
const MIXTURE_TRUTH: f64 = 2.418_091_908_091_908;
/// Full-scale RMSE reference for the same setting, printed alongside.
const REFERENCE_RMSE: f64 = 0.7081;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Shared state: theory results and preset reports reused by criterion 10.
#[derive(Default)]
struct Suite {
    theory: TheoryReport,
    reports: BTreeMap<String, RunReport>,
}

impl Suite {
    fn theory_check(&mut self, name: &str) -> imiwae::Result<f64> {
        let start = Instant::now();
        run_check(name, &TheoryConfig::default(), &mut self.theory)?;
        Ok(start.elapsed().as_secs_f64())
    }

    fn report(&mut self, name: &str) -> imiwae::Result<&RunReport> {
        if !self.reports.contains_key(name) {
            let report = run(&preset(name)?)?;
            let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
            std::fs::create_dir_all(&dir)?;
            report.save(dir.join(format!("{name}.json")))?;
            self.reports.insert(name.to_string(), report);
        }
        Ok(&self.reports[name])
    }
}

fn count(values: &[f64]) -> usize {
    values.iter().filter(|&&v| v == 1.0).count()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn c1_lemma1(s: &mut Suite) -> imiwae::Result<Outcome> {
    let secs = s.theory_check("lemma1")?;
    let r = s.theory.lemma1.as_ref().expect("lemma1 ran");
    Ok(outcome(
        r.trials == 100 && r.worst_exact < 1e-12 && secs < 5.0,
        format!(
            "{} mechanisms, worst exact error {:.2e}, {secs:.2} s",
            r.trials, r.worst_exact
        ),
    ))
}

fn c2_monotone(s: &mut Suite) -> imiwae::Result<Outcome> {
    let secs = s.theory_check("monotone")?;
    let r = s.theory.monotone.as_ref().expect("monotone ran");
    let log_mu = SIGMA * SIGMA / 2.0;
    let bounded = r.estimates.iter().all(|&e| e <= log_mu);
    let monotone = r
        .estimates
        .windows(2)
        .zip(r.std_errors.windows(2))
        .all(|(e, se)| e[1] >= e[0] - 2.0 * (se[0] * se[0] + se[1] * se[1]).sqrt());
    let shown: Vec<String> =
        r.ks.iter()
            .zip(&r.estimates)
            .map(|(k, e)| format!("L_{k}={e:.5}"))
            .collect();
    Ok(outcome(
        monotone && bounded && (r.log_mean - log_mu).abs() < 1e-15 && r.outer_reps == 100_000 && secs < 60.0,
        format!("{} (log mean {log_mu}), {secs:.1} s", shown.join(" ")),
    ))
}

fn c3_bias_variance(s: &mut Suite) -> imiwae::Result<Outcome> {
    let secs = s.theory_check("bias-variance")?;
    let r = s.theory.bias_variance.as_ref().expect("bias-variance ran");
    let cv2 = (SIGMA * SIGMA).exp() - 1.0;
    let (want_bias, want_var) = (-cv2 / 2.0, cv2);
    let mut pass = r.reps == 1_000_000 && secs < 600.0;
    let mut shown = Vec::new();
    for row in &r.rows {
        pass &= ((row.k_bias - want_bias) / want_bias).abs() < 0.10;
        pass &= ((row.k_variance - want_var) / want_var).abs() < 0.10;
        shown.push(format!(
            "K={}: K·bias {:.4} K·var {:.4}",
            row.k, row.k_bias, row.k_variance
        ));
    }
    Ok(outcome(
        pass,
        format!(
            "{} (targets {want_bias:.4} / {want_var:.4}), {secs:.1} s",
            shown.join("; ")
        ),
    ))
}

fn small_config(lin: Linearity) -> ModelConfig {
    let mut c = ModelConfig::new(3, 2);
    c.hidden_width = 8;
    c.k = 3;
    c.missingness_decoder = lin;
    c
}

fn c4_gradients(_: &mut Suite) -> imiwae::Result<Outcome> {
    let start = Instant::now();
    let mut rng = SeededRng::new(404);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (lin, probes) in [(Linearity::Nonlinear, 50), (Linearity::Linear, 50)] {
        let c = small_config(lin);
        let mut params = ModelParams::new(&c, &mut rng)?;
        let rows = 4;
        let values = Array2::from_shape_fn((rows, 3), |_| rng.normal());
        let mask = Array2::from_shape_fn((rows, 3), |(i, j)| (i + j) % 3 != 0);
        let noise = BatchNoise::draw(rows, c.k, &c, &mut rng);
        let mut grads = params.zeros_like();
        params.objective_and_gradient(values.view(), mask.view(), &noise, 1.0, &mut grads)?;
        let n = params.num_scalars();
        // the self-censoring weights of the linear decoder are pinned at zero
        let pinned: Vec<String> = match lin {
            Linearity::Linear => (0..3)
                .map(|j| format!("missingness.layer0.weight[{}]", 4 * j))
                .collect(),
            Linearity::Nonlinear => Vec::new(),
        };
        let mut done = 0;
        while done < probes {
            let idx = rng.below(n);
            if pinned.contains(&params.flat_name(idx)) {
                continue;
            }
            let numeric = central_difference(&mut params, idx, FD_STEP, |q| {
                q.objective(values.view(), mask.view(), &noise).unwrap().iter().sum()
            });
            worst = worst.max(relative_error(grads.get_flat(idx), numeric));
            done += 1;
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        worst < 1e-3 && secs < 60.0,
        format!("{checked} coordinates, worst relative error {worst:.2e}, {secs:.2} s"),
    ))
}

fn c5_no_self_censoring(_: &mut Suite) -> imiwae::Result<Outcome> {
    let start = Instant::now();
    let mut rng = SeededRng::new(505);
    let mut moved = 0;
    let probes = 1000;
    for t in 0..probes {
        let lin = if t % 2 == 0 {
            Linearity::Linear
        } else {
            Linearity::Nonlinear
        };
        let c = small_config(lin);
        let params = ModelParams::new(&c, &mut rng)?;
        let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let zt = [rng.normal()];
        let j = rng.below(3);
        let h = 0.1 + rng.uniform();
        let (mut up, mut down) = (x.clone(), x.clone());
        up[j] += h;
        down[j] -= h;
        let a = params.decode_missingness(&up, &zt)?[j];
        let b = params.decode_missingness(&down, &zt)?[j];
        if (a - b) / (2.0 * h) != 0.0 {
            moved += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        moved == 0 && secs < 10.0,
        format!("{probes} probes, {moved} with nonzero sensitivity, {secs:.2} s"),
    ))
}

fn c6_mixture(s: &mut Suite) -> imiwae::Result<Outcome> {
    let oracle = MIXTURE_TRUTH;
    let r = s.report("mixture-mean")?;
    let wins = count(&r.metric("imputed_beats_complete_case"));
    let truth_ok = r.metric("truth").iter().all(|&t| (t - oracle).abs() < 1e-9);
    Ok(outcome(
        wins >= 8 && truth_ok && r.replications.len() == 10,
        format!(
            "imputed beats complete case in {wins}/10; truth {oracle:.6}; mean |error| imputed {:.4} vs complete case {:.4}; {:.0} s",
            mean(&r.metric("imputed_abs_error")),
            mean(&r.metric("complete_case_abs_error")),
            r.wall_seconds
        ),
    ))
}

fn c7_imputation(s: &mut Suite) -> imiwae::Result<Outcome> {
    let r = s.report("table1-linear-latent")?;
    let rmse = r.metric("rmse");
    let base = r.metric("rmse_mean_imputation");
    let untrained = r.metric("rmse_untrained");
    let per_rep = rmse
        .iter()
        .zip(&base)
        .zip(&untrained)
        .filter(|((a, b), c)| a < b && a < c)
        .count();
    let m = mean(&rmse);
    Ok(outcome(
        per_rep == 10 && rmse.len() == 10 && (0.55..=1.0).contains(&m),
        format!(
            "below both baselines in {per_rep}/10; mean RMSE {m:.4} (reference {REFERENCE_RMSE}), mean baseline {:.4}, untrained {:.4}; {:.0} s",
            mean(&base),
            mean(&untrained),
            r.wall_seconds
        ),
    ))
}

fn c8_mmd(s: &mut Suite) -> imiwae::Result<Outcome> {
    let r = s.report("table1-linear-latent")?;
    let closer = count(&r.metric("generated_closer_than_observed"));
    let null = r.metric("mmd_null");
    let worst_null = null.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(outcome(
        closer >= 7 && null.len() == 10 && worst_null < 0.005,
        format!(
            "generated closer in {closer}/10; mean MMD² generated {:.5} (reference {REFERENCE_MMD}) vs observed rows {:.5}; worst |null| {worst_null:.2e}",
            mean(&r.metric("mmd_generated")),
            mean(&r.metric("mmd_observed_complete_rows")),
        ),
    ))
}

fn c9_cv(s: &mut Suite) -> imiwae::Result<Outcome> {
    let r = s.report("cv-latent-dim")?;
    let one = r.metric("cv_rmse_kappa1_1");
    let three = r.metric("cv_rmse_kappa1_3");
    let (a, b) = (mean(&one), mean(&three));
    Ok(outcome(
        one.len() == 10 && three.len() == 10 && a > b,
        format!("mean CV-RMSE κ₁=1 {a:.4} vs κ₁=3 {b:.4}; {:.0} s", r.wall_seconds),
    ))
}

fn same_record(a: &ReplicationRecord, b: &ReplicationRecord) -> bool {
    a.index == b.index && a.seeds == b.seeds && a.metrics == b.metrics && a.details == b.details
}

fn c10_determinism(s: &mut Suite) -> imiwae::Result<Outcome> {
    let mut notes = Vec::new();
    let mut pass = true;

    // theory-all's single replication uses the default theory seed, so it
    // must reproduce the checks run above one by one.
    for name in CHECK_NAMES {
        if !has_check(&s.theory, name) {
            s.theory_check(name)?;
        }
    }
    let expected = serde_json::to_value(&s.theory)?;
    let theory = run(&preset("theory-all")?)?;
    let ok = theory.replications[0].details == expected;
    pass &= ok;
    notes.push(format!("theory-all {}", if ok { "identical" } else { "DIFFERS" }));

    for name in ["mixture-mean", "table1-linear-latent", "cv-latent-dim"] {
        let again = run_one(&preset(name)?, 0)?;
        let ok = same_record(&s.report(name)?.replications[0], &again);
        pass &= ok;
        notes.push(format!("{name} rep 0 {}", if ok { "identical" } else { "DIFFERS" }));
    }
    Ok(outcome(pass, notes.join(", ")))
}

fn has_check(r: &TheoryReport, name: &str) -> bool {
    match name {
        "lemma1" => r.lemma1.is_some(),
        "monotone" => r.monotone.is_some(),
        "bias-variance" => r.bias_variance.is_some(),
        _ => r.convergence.is_some(),
    }
}

type Criterion = fn(&mut Suite) -> imiwae::Result<Outcome>;

fn main() -> ExitCode {
    // cargo test passes harness flags such as --list; only run on a plain invocation.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let only: Option<Vec<usize>> = std::env::var("IMIWAE_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());

    let criteria: [(usize, &str, Criterion); 10] = [
        (1, "mechanism oracle exactness", c1_lemma1),
        (2, "bound monotonicity", c2_monotone),
        (3, "leading-order bias and variance", c3_bias_variance),
        (4, "gradient correctness", c4_gradients),
        (5, "structural no-self-censoring", c5_no_self_censoring),
        (6, "mixture mean recovery", c6_mixture),
        (7, "imputation quality", c7_imputation),
        (8, "MMD sanity and direction", c8_mmd),
        (9, "latent dimension selection", c9_cv),
        (10, "determinism", c10_determinism),
    ];
    let mut suite = Suite::default();
    let mut failed = 0;
    for (id, title, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            println!("SKIP {id:>2} {title}");
            continue;
        }
        match check(&mut suite) {
            Ok(o) => {
                println!("{} {id:>2} {title}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
                failed += usize::from(!o.pass);
            }
            Err(e) => {
                println!("FAIL {id:>2} {title}: error: {e}");
                failed += 1;
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
