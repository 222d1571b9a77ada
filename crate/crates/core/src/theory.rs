//! Executable checks of the importance-weighted bound's theory on weight
//! laws with closed-form moments, and the constructive threshold decoder
//! that reproduces any discrete missingness mechanism.
//!
//! For i.i.d. positive weights `w` with mean `μ` and central moments
//! `μ₂, μ₃`, the estimator `L̂_K = log(mean of K weights)` satisfies
//!
//! * `L_K = E[L̂_K]` is nondecreasing in `K` and bounded by `log μ`;
//! * `bias(L̂_K) = -μ₂ / (2Kμ²) + O(K⁻²)` and `var(L̂_K) = μ₂ / (Kμ²) + O(K⁻²)`;
//! * `L̂_K → log μ` in probability.
//!
//! Every check is a pure function of the law and a seed. Monte Carlo work is
//! split into fixed blocks with their own random streams, so results do not
//! depend on the number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

const BLOCK: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum WeightLaw {
    /// `exp(N(mu0, sigma²))`.
    LogNormal {
        mu0: f64,
        sigma: f64,
    },
    /// `a` with probability `q`, otherwise `b`.
    TwoPoint {
        a: f64,
        b: f64,
        q: f64,
    },
    Constant {
        c: f64,
    },
}

impl WeightLaw {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            WeightLaw::LogNormal { mu0, sigma } => mu0.is_finite() && sigma.is_finite() && sigma >= 0.0,
            WeightLaw::TwoPoint { a, b, q } => {
                a > 0.0 && b > 0.0 && (0.0..=1.0).contains(&q) && a.is_finite() && b.is_finite()
            }
            WeightLaw::Constant { c } => c > 0.0 && c.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("{self:?} is not a positive weight law")))
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            WeightLaw::LogNormal { mu0, sigma } => (mu0 + 0.5 * sigma * sigma).exp(),
            WeightLaw::TwoPoint { a, b, q } => q * a + (1.0 - q) * b,
            WeightLaw::Constant { c } => c,
        }
    }

    /// Second central moment.
    pub fn mu2(&self) -> f64 {
        match *self {
            WeightLaw::LogNormal { mu0, sigma } => (sigma * sigma).exp_m1() * (2.0 * mu0 + sigma * sigma).exp(),
            WeightLaw::TwoPoint { a, b, q } => q * (1.0 - q) * (a - b).powi(2),
            WeightLaw::Constant { .. } => 0.0,
        }
    }

    /// Third central moment.
    pub fn mu3(&self) -> f64 {
        match *self {
            WeightLaw::LogNormal { sigma, .. } => {
                let s2 = sigma * sigma;
                (s2.exp() + 2.0) * s2.exp_m1().sqrt() * self.mu2().powf(1.5)
            }
            WeightLaw::TwoPoint { a, b, q } => q * (1.0 - q) * (1.0 - 2.0 * q) * (a - b).powi(3),
            WeightLaw::Constant { .. } => 0.0,
        }
    }

    /// Squared coefficient of variation `μ₂ / μ²`.
    pub fn cv2(&self) -> f64 {
        self.mu2() / self.mean().powi(2)
    }

    pub fn sample(&self, rng: &mut SeededRng) -> f64 {
        match *self {
            WeightLaw::LogNormal { mu0, sigma } => (mu0 + sigma * rng.normal()).exp(),
            WeightLaw::TwoPoint { a, b, q } => {
                if rng.uniform() < q {
                    a
                } else {
                    b
                }
            }
            WeightLaw::Constant { c } => c,
        }
    }

    /// Leading-order bias of `L̂_K`: `-μ₂ / (2Kμ²)`.
    pub fn predicted_bias(&self, k: usize) -> f64 {
        -0.5 * self.cv2() / k as f64
    }

    /// Leading-order variance of `L̂_K`: `μ₂ / (Kμ²)`.
    pub fn predicted_variance(&self, k: usize) -> f64 {
        self.cv2() / k as f64
    }
}

/// Runs `reps` trials split into blocks; `f(block_rng, block_len)` returns a
/// per-block accumulator, and blocks are combined in block order.
fn blocked<A: Send>(reps: usize, seed: u64, f: impl Fn(&mut SeededRng, usize) -> A + Sync) -> Vec<A> {
    let blocks = reps.div_ceil(BLOCK);
    let root = SeededRng::new(seed);
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let len = BLOCK.min(reps - b * BLOCK);
            f(&mut root.substream(b as u64), len)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneReport {
    pub law: WeightLaw,
    pub ks: Vec<usize>,
    pub outer_reps: usize,
    /// Monte Carlo `L_K` per `K`.
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub log_mean: f64,
    /// `L_{K_{i+1}} ≥ L_{K_i} - 2·sqrt(se_i² + se_{i+1}²)` for all `i`.
    pub monotone: bool,
    /// `L_K ≤ log μ` for all `K`.
    pub bounded: bool,
    pub passed: bool,
}

/// Estimates `L_K` for every `K` with common random numbers: each outer
/// replication draws `max K` weights and `L̂_K` uses the first `K`.
pub fn check_monotone_bounds(law: WeightLaw, ks: &[usize], outer_reps: usize, seed: u64) -> Result<MonotoneReport> {
    law.validate()?;
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 {
        return Err(Error::Domain("Ks must be positive and strictly ascending".into()));
    }
    if outer_reps < 2 {
        return Err(Error::Domain("need at least 2 outer replications".into()));
    }
    let kmax = *ks.last().unwrap();
    let log_mean = law.mean().ln();
    // per K: sum and sum of squares of (L̂_K - log μ)
    let blocks = blocked(outer_reps, seed, |rng, len| {
        let mut acc = vec![(0.0, 0.0); ks.len()];
        for _ in 0..len {
            let mut total = 0.0;
            let mut next = 0;
            for k in 1..=kmax {
                total += law.sample(rng);
                if k == ks[next] {
                    let d = (total / k as f64).ln() - log_mean;
                    acc[next].0 += d;
                    acc[next].1 += d * d;
                    next += 1;
                }
            }
        }
        acc
    });
    let n = outer_reps as f64;
    let mut estimates = Vec::with_capacity(ks.len());
    let mut std_errors = Vec::with_capacity(ks.len());
    for i in 0..ks.len() {
        let (s, s2) = blocks
            .iter()
            .fold((0.0, 0.0), |(a, b), blk| (a + blk[i].0, b + blk[i].1));
        let m = s / n;
        let var = ((s2 - n * m * m) / (n - 1.0)).max(0.0);
        estimates.push(log_mean + m);
        std_errors.push((var / n).sqrt());
    }
    let monotone = (1..ks.len()).all(|i| {
        let pooled = (std_errors[i].powi(2) + std_errors[i - 1].powi(2)).sqrt();
        estimates[i] >= estimates[i - 1] - 2.0 * pooled
    });
    let bounded = estimates.iter().all(|&e| e <= log_mean);
    Ok(MonotoneReport {
        law,
        ks: ks.to_vec(),
        outer_reps,
        estimates,
        std_errors,
        log_mean,
        monotone,
        bounded,
        passed: monotone && bounded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceRow {
    pub k: usize,
    /// Plain Monte Carlo `mean(L̂_K) - log μ`.
    pub bias_plain: f64,
    /// `mean(L̂_K - (Ȳ_K - μ)/μ) - log μ`, where `Ȳ_K` is the sample mean.
    /// The correction has expectation zero and removes the dominant noise.
    pub bias: f64,
    pub bias_std_error: f64,
    pub variance: f64,
    pub predicted_bias: f64,
    pub predicted_variance: f64,
    /// `K · bias` and `K · variance`, the quantities compared.
    pub k_bias: f64,
    pub k_variance: f64,
    pub bias_rel_error: f64,
    pub variance_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasVarianceReport {
    pub law: WeightLaw,
    pub reps: usize,
    pub tolerance: f64,
    pub rows: Vec<BiasVarianceRow>,
    pub passed: bool,
}

/// Empirical bias and variance of `L̂_K` against the leading-order terms.
/// Passes when both are within `tolerance` (relative) at every `K`.
pub fn check_bias_variance(
    law: WeightLaw,
    ks: &[usize],
    reps: usize,
    tolerance: f64,
    seed: u64,
) -> Result<BiasVarianceReport> {
    law.validate()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Domain("Ks must be positive".into()));
    }
    if reps < 2 {
        return Err(Error::Domain("need at least 2 replications".into()));
    }
    let mu = law.mean();
    let log_mu = mu.ln();
    let n = reps as f64;
    let mut rows = Vec::with_capacity(ks.len());
    for (idx, &k) in ks.iter().enumerate() {
        // sums of d = L̂ - log μ, d², and of the corrected c = d - (Ȳ - μ)/μ, c²
        let blocks = blocked(reps, seed.wrapping_add(idx as u64 * 0x1000_0000), |rng, len| {
            let mut acc = [0.0; 4];
            for _ in 0..len {
                let ybar = (0..k).map(|_| law.sample(rng)).sum::<f64>() / k as f64;
                let d = ybar.ln() - log_mu;
                let c = d - (ybar - mu) / mu;
                acc[0] += d;
                acc[1] += d * d;
                acc[2] += c;
                acc[3] += c * c;
            }
            acc
        });
        let tot = blocks.iter().fold([0.0; 4], |mut a, b| {
            for i in 0..4 {
                a[i] += b[i];
            }
            a
        });
        let bias_plain = tot[0] / n;
        let variance = ((tot[1] - n * bias_plain * bias_plain) / (n - 1.0)).max(0.0);
        let bias = tot[2] / n;
        let cvar = ((tot[3] - n * bias * bias) / (n - 1.0)).max(0.0);
        let predicted_bias = law.predicted_bias(k);
        let predicted_variance = law.predicted_variance(k);
        let rel = |got: f64, want: f64| {
            if want == 0.0 {
                got.abs()
            } else {
                ((got - want) / want).abs()
            }
        };
        rows.push(BiasVarianceRow {
            k,
            bias_plain,
            bias,
            bias_std_error: (cvar / n).sqrt(),
            variance,
            predicted_bias,
            predicted_variance,
            k_bias: k as f64 * bias,
            k_variance: k as f64 * variance,
            bias_rel_error: rel(bias, predicted_bias),
            variance_rel_error: rel(variance, predicted_variance),
        });
    }
    let passed = rows
        .iter()
        .all(|r| r.bias_rel_error <= tolerance && r.variance_rel_error <= tolerance);
    Ok(BiasVarianceReport {
        law,
        reps,
        tolerance,
        rows,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub law: WeightLaw,
    pub ks: Vec<usize>,
    pub epsilon: f64,
    pub trials: Vec<usize>,
    /// Empirical `P(|L̂_K - log μ| ≥ ε)` per `K`.
    pub exceedance: Vec<f64>,
    /// Chebyshev-type bound `μ₂ / (K μ² ε²)` per `K` (capped at 1).
    pub chebyshev: Vec<f64>,
    pub nonincreasing: bool,
    pub within_bound: bool,
    pub final_below: f64,
    pub passed: bool,
}

/// Exceedance probabilities along `ks`. Passes when they do not increase,
/// stay below ten times the Chebyshev bound, and the last one is below
/// `final_below`.
pub fn check_convergence_probability(
    law: WeightLaw,
    ks: &[usize],
    epsilon: f64,
    trials: &[usize],
    final_below: f64,
    seed: u64,
) -> Result<ConvergenceReport> {
    law.validate()?;
    if !(epsilon > 0.0) {
        return Err(Error::Domain("epsilon must be positive".into()));
    }
    if ks.is_empty() || trials.len() != ks.len() || trials.contains(&0) || ks.contains(&0) {
        return Err(Error::Domain("need one positive trial count per positive K".into()));
    }
    let log_mu = law.mean().ln();
    let mut exceedance = Vec::with_capacity(ks.len());
    for (idx, (&k, &t)) in ks.iter().zip(trials).enumerate() {
        let hits: usize = blocked(t, seed.wrapping_add(idx as u64 * 0x1000_0000), |rng, len| {
            (0..len)
                .filter(|_| {
                    let ybar = (0..k).map(|_| law.sample(rng)).sum::<f64>() / k as f64;
                    (ybar.ln() - log_mu).abs() >= epsilon
                })
                .count()
        })
        .into_iter()
        .sum();
        exceedance.push(hits as f64 / t as f64);
    }
    let chebyshev: Vec<f64> = ks
        .iter()
        .map(|&k| (law.predicted_variance(k) / (epsilon * epsilon)).min(1.0))
        .collect();
    let nonincreasing = exceedance.windows(2).all(|w| w[1] <= w[0]);
    let within_bound = exceedance.iter().zip(&chebyshev).all(|(&e, &c)| e <= 10.0 * c);
    let last_ok = *exceedance.last().unwrap() < final_below;
    Ok(ConvergenceReport {
        law,
        ks: ks.to_vec(),
        epsilon,
        trials: trials.to_vec(),
        exceedance,
        chebyshev,
        nonincreasing,
        within_bound,
        final_below,
        passed: nonincreasing && within_bound && last_ok,
    })
}

/// Probabilities of the `2^p` missingness patterns for each value of a
/// discrete covariate. Pattern `r` has index `Σ_j r_j 2^j` (column 0 is the
/// least significant bit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMechanism {
    pub p: usize,
    pub tables: Vec<Vec<f64>>,
}

impl DiscreteMechanism {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.p) {
            return Err(Error::Domain(format!("p must be 1, 2 or 3, got {}", self.p)));
        }
        let m = 1usize << self.p;
        for (x, t) in self.tables.iter().enumerate() {
            if t.len() != m {
                return Err(Error::Domain(format!(
                    "table {x} has {} entries, expected {m}",
                    t.len()
                )));
            }
            if t.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "table {x} has a negative or non-finite probability"
                )));
            }
            let s: f64 = t.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Domain(format!("table {x} sums to {s}")));
            }
        }
        if self.tables.is_empty() {
            return Err(Error::Domain("mechanism has no tables".into()));
        }
        Ok(())
    }

    /// Uniform draw from the simplex for each of `n_x` covariate values.
    pub fn random(p: usize, n_x: usize, rng: &mut SeededRng) -> Self {
        let m = 1usize << p;
        let tables = (0..n_x)
            .map(|_| {
                let e: Vec<f64> = (0..m).map(|_| -(1.0 - rng.uniform()).ln()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect();
        Self { p, tables }
    }
}

/// Cumulative breakpoints `0 = C_0 ≤ C_1 ≤ … ≤ C_{2^p} = 1` of a table.
fn breakpoints(table: &[f64]) -> Vec<f64> {
    let mut c = Vec::with_capacity(table.len() + 1);
    c.push(0.0);
    let mut acc = 0.0;
    for &v in table {
        acc += v;
        c.push(acc);
    }
    // pin the last breakpoint so the intervals cover [0, 1)
    *c.last_mut().unwrap() = 1.0;
    c
}

/// The constructive decoder for indicator `j`: 1 when `u` falls in the
/// interval of a pattern with `r_j = 1`, else 0. Intervals are
/// `[C_{m}, C_{m+1})` in pattern-index order.
pub fn threshold_decoder(breaks: &[f64], j: usize, u: f64) -> f64 {
    let m = breaks.len() - 1;
    let idx = (0..m).find(|&i| u >= breaks[i] && u < breaks[i + 1]).unwrap_or(m - 1);
    ((idx >> j) & 1) as f64
}

fn pattern_likelihood(breaks: &[f64], p: usize, pattern: usize, u: f64) -> f64 {
    (0..p)
        .map(|j| {
            let f = threshold_decoder(breaks, j, u);
            if (pattern >> j) & 1 == 1 {
                f
            } else {
                1.0 - f
            }
        })
        .product()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Reconstruction {
    pub truth: Vec<f64>,
    /// `∫ ∏_j Bernoulli(r_j; f_j(u)) du` integrated exactly piece by piece.
    pub exact: Vec<f64>,
    /// The same integral on a midpoint grid.
    pub grid: Vec<f64>,
    pub grid_size: usize,
    pub max_error_exact: f64,
    pub max_error_grid: f64,
    pub passed: bool,
}

/// Reconstructs `p(r | x)` from the threshold decoders driven by a uniform
/// latent. Exact integration is piecewise over the breakpoints, where every
/// decoder is constant; the grid version is an independent cross-check.
pub fn lemma1_oracle(mech: &DiscreteMechanism, x: usize, grid_size: usize) -> Result<Lemma1Reconstruction> {
    mech.validate()?;
    if grid_size < 1000 {
        return Err(Error::Domain(format!(
            "grid size must be at least 1000, got {grid_size}"
        )));
    }
    let truth = mech
        .tables
        .get(x)
        .ok_or_else(|| Error::Domain(format!("no table for covariate value {x}")))?
        .clone();
    let p = mech.p;
    let m = truth.len();
    let breaks = breakpoints(&truth);

    let mut exact = vec![0.0; m];
    for piece in 0..m {
        let (a, b) = (breaks[piece], breaks[piece + 1]);
        if b <= a {
            continue;
        }
        let mid = 0.5 * (a + b);
        for (r, e) in exact.iter_mut().enumerate() {
            *e += (b - a) * pattern_likelihood(&breaks, p, r, mid);
        }
    }

    let mut grid = vec![0.0; m];
    for g in 0..grid_size {
        let u = (g as f64 + 0.5) / grid_size as f64;
        for (r, v) in grid.iter_mut().enumerate() {
            *v += pattern_likelihood(&breaks, p, r, u);
        }
    }
    grid.iter_mut().for_each(|v| *v /= grid_size as f64);

    let max_err = |est: &[f64]| est.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let max_error_exact = max_err(&exact);
    let max_error_grid = max_err(&grid);
    Ok(Lemma1Reconstruction {
        passed: max_error_exact < 1e-12 && max_error_grid < 2.0 / grid_size as f64,
        truth,
        exact,
        grid,
        grid_size,
        max_error_exact,
        max_error_grid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Batch {
    pub trials: usize,
    pub worst_exact: f64,
    pub worst_grid: f64,
    pub passed: bool,
}

/// `trials` random mechanisms, cycling `p` through 1, 2, 3.
pub fn lemma1_random_trials(trials: usize, grid_size: usize, seed: u64) -> Result<Lemma1Batch> {
    let mut rng = SeededRng::new(seed);
    let mut worst_exact: f64 = 0.0;
    let mut worst_grid: f64 = 0.0;
    let mut passed = true;
    for t in 0..trials {
        let mech = DiscreteMechanism::random(1 + t % 3, 2, &mut rng);
        for x in 0..mech.tables.len() {
            let r = lemma1_oracle(&mech, x, grid_size)?;
            worst_exact = worst_exact.max(r.max_error_exact);
            worst_grid = worst_grid.max(r.max_error_grid);
            passed &= r.passed;
        }
    }
    Ok(Lemma1Batch {
        trials,
        worst_exact,
        worst_grid,
        passed,
    })
}

/// Sizes for [`run_all`]; the defaults are the full acceptance sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub seed: u64,
    pub lognormal_sigma: f64,
    pub monotone_ks: Vec<usize>,
    pub monotone_reps: usize,
    pub bias_ks: Vec<usize>,
    pub bias_reps: usize,
    pub bias_tolerance: f64,
    pub convergence_ks: Vec<usize>,
    pub convergence_trials: Vec<usize>,
    pub convergence_epsilon: f64,
    pub lemma1_trials: usize,
    pub lemma1_grid: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lognormal_sigma: 0.5,
            monotone_ks: vec![1, 2, 5, 20, 100, 1000],
            monotone_reps: 100_000,
            bias_ks: vec![100, 300, 1000],
            bias_reps: 1_000_000,
            bias_tolerance: 0.10,
            convergence_ks: vec![10, 100, 1000, 10_000],
            convergence_trials: vec![100_000, 100_000, 10_000, 10_000],
            convergence_epsilon: 0.05,
            lemma1_trials: 100,
            lemma1_grid: 10_000,
        }
    }
}

/// Names accepted by [`run_check`].
pub const CHECK_NAMES: [&str; 4] = ["monotone", "bias-variance", "convergence", "lemma1"];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TheoryReport {
    pub monotone: Option<MonotoneReport>,
    pub bias_variance: Option<BiasVarianceReport>,
    pub convergence: Option<ConvergenceReport>,
    pub lemma1: Option<Lemma1Batch>,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.monotone.as_ref().is_none_or(|r| r.passed)
            && self.bias_variance.as_ref().is_none_or(|r| r.passed)
            && self.convergence.as_ref().is_none_or(|r| r.passed)
            && self.lemma1.as_ref().is_none_or(|r| r.passed)
    }
}

/// Runs one named check into `report`.
pub fn run_check(name: &str, config: &TheoryConfig, report: &mut TheoryReport) -> Result<()> {
    let law = WeightLaw::LogNormal {
        mu0: 0.0,
        sigma: config.lognormal_sigma,
    };
    match name {
        "monotone" => {
            report.monotone = Some(check_monotone_bounds(
                law,
                &config.monotone_ks,
                config.monotone_reps,
                config.seed,
            )?)
        }
        "bias-variance" => {
            report.bias_variance = Some(check_bias_variance(
                law,
                &config.bias_ks,
                config.bias_reps,
                config.bias_tolerance,
                config.seed.wrapping_add(1),
            )?)
        }
        "convergence" => {
            report.convergence = Some(check_convergence_probability(
                law,
                &config.convergence_ks,
                config.convergence_epsilon,
                &config.convergence_trials,
                0.01,
                config.seed.wrapping_add(2),
            )?)
        }
        "lemma1" => {
            report.lemma1 = Some(lemma1_random_trials(
                config.lemma1_trials,
                config.lemma1_grid,
                config.seed.wrapping_add(3),
            )?)
        }
        other => {
            return Err(Error::Spec(format!(
                "unknown check {other:?}; expected one of {}",
                CHECK_NAMES.join(", ")
            )))
        }
    }
    Ok(())
}

/// Every check.
pub fn run_all(config: &TheoryConfig) -> Result<TheoryReport> {
    let mut report = TheoryReport::default();
    for name in CHECK_NAMES {
        run_check(name, config, &mut report)?;
    }
    Ok(report)
}
