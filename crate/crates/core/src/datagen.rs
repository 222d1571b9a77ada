//! Ground-truth data: nonlinear latent-factor tables and the three-variable
//! Gaussian mixture whose components are indexed by missingness pattern.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::DataTable;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

fn default_noise_std() -> f64 {
    0.1
}

fn default_factor_width() -> usize {
    8
}

/// `X_j = f_j(Z) + ε_j` with `Z ~ N(0, I_q)`, `ε_j ~ N(0, noise_std²)` and
/// each `f_j` a one-hidden-layer tanh map with uniform(-1, 1) coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentFactorSpec {
    pub n: usize,
    pub p: usize,
    pub latent_dim: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default = "default_factor_width")]
    pub hidden_width: usize,
    #[serde(default)]
    pub seed: u64,
}

impl LatentFactorSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n == 0 {
            problems.push("n must be at least 1".to_string());
        }
        if self.p == 0 {
            problems.push("p must be at least 1".to_string());
        }
        if self.latent_dim == 0 {
            problems.push("latent_dim must be at least 1".to_string());
        }
        if self.hidden_width == 0 {
            problems.push("hidden_width must be at least 1".to_string());
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            problems.push(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Spec(problems.join("; ")))
        }
    }
}

/// Coefficients of the per-column maps `f_j(z) = v_j · tanh(W_j z + b_j) + c_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMaps {
    /// `p` matrices of shape `hidden_width x latent_dim`.
    pub hidden_weights: Vec<Array2<f64>>,
    pub hidden_biases: Vec<Vec<f64>>,
    pub output_weights: Vec<Vec<f64>>,
    pub output_biases: Vec<f64>,
}

impl FactorMaps {
    pub fn random(p: usize, latent_dim: usize, width: usize, rng: &mut SeededRng) -> Self {
        let mut maps = Self::zeros(p, latent_dim, width);
        for j in 0..p {
            maps.hidden_weights[j].mapv_inplace(|_| rng.uniform_range(-1.0, 1.0));
            maps.hidden_biases[j]
                .iter_mut()
                .for_each(|b| *b = rng.uniform_range(-1.0, 1.0));
            maps.output_weights[j]
                .iter_mut()
                .for_each(|v| *v = rng.uniform_range(-1.0, 1.0));
            maps.output_biases[j] = rng.uniform_range(-1.0, 1.0);
        }
        maps
    }

    pub fn zeros(p: usize, latent_dim: usize, width: usize) -> Self {
        Self {
            hidden_weights: vec![Array2::zeros((width, latent_dim)); p],
            hidden_biases: vec![vec![0.0; width]; p],
            output_weights: vec![vec![0.0; width]; p],
            output_biases: vec![0.0; p],
        }
    }

    pub fn eval(&self, j: usize, z: &[f64]) -> f64 {
        let w = &self.hidden_weights[j];
        let mut out = self.output_biases[j];
        for (h, row) in w.rows().into_iter().enumerate() {
            let a: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + self.hidden_biases[j][h];
            out += self.output_weights[j][h] * a.tanh();
        }
        out
    }
}

/// A draw from the latent-factor model with the quantities behind it.
#[derive(Debug, Clone)]
pub struct LatentFactorSample {
    pub table: DataTable,
    /// `n x latent_dim` latent draws.
    pub latents: Array2<f64>,
    /// Noise-free values `f_j(z)`.
    pub signal: Array2<f64>,
}

/// Maps are drawn from substream 0 of the seed, latents and noise from
/// substream 1.
pub fn factor_maps(spec: &LatentFactorSpec) -> FactorMaps {
    let mut rng = SeededRng::new(spec.seed).substream(0);
    FactorMaps::random(spec.p, spec.latent_dim, spec.hidden_width, &mut rng)
}

pub fn sample_latent_factor(spec: &LatentFactorSpec, maps: &FactorMaps) -> Result<LatentFactorSample> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed).substream(1);
    let (n, p, q) = (spec.n, spec.p, spec.latent_dim);
    let mut latents = Array2::zeros((n, q));
    let mut signal = Array2::zeros((n, p));
    let mut values = Array2::zeros((n, p));
    let mut z = vec![0.0; q];
    for i in 0..n {
        rng.fill_normal(&mut z);
        for (k, &zk) in z.iter().enumerate() {
            latents[[i, k]] = zk;
        }
        for j in 0..p {
            let s = maps.eval(j, &z);
            signal[[i, j]] = s;
            values[[i, j]] = s + spec.noise_std * rng.normal();
        }
    }
    Ok(LatentFactorSample {
        table: DataTable::fully_observed(values)?,
        latents,
        signal,
    })
}

/// Fully observed table from the latent-factor model.
pub fn gen_latent_factor_data(spec: &LatentFactorSpec) -> Result<DataTable> {
    let maps = factor_maps(spec);
    Ok(sample_latent_factor(spec, &maps)?.table)
}

/// One mixture component: a missingness pattern, its probability and the
/// natural-parameter vector `h(r)`; the component mean is `Σ₀ h(r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    /// `true` = observed.
    pub pattern: Vec<bool>,
    pub prob: f64,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureSpec {
    pub components: Vec<MixtureComponent>,
    pub sigma0: Vec<Vec<f64>>,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Pattern probabilities as listed (rounded to three decimals, summing to
/// 1.001) with their `h(r)` vectors, in the listed order.
pub const MIXTURE_PATTERNS: [([u8; 3], f64, [f64; 3]); 8] = [
    ([1, 0, 0], 0.169, [1.4, 1.6, 0.9]),
    ([0, 1, 0], 0.153, [1.9, 1.1, 1.4]),
    ([1, 1, 0], 0.136, [1.9, 1.6, 0.2]),
    ([0, 0, 1], 0.119, [0.5, 1.9, 2.1]),
    ([1, 0, 1], 0.102, [0.5, 2.4, 0.9]),
    ([0, 1, 1], 0.085, [1.0, 1.9, 1.4]),
    ([1, 1, 1], 0.169, [1.0, 2.4, 0.2]),
    ([0, 0, 0], 0.068, [1.4, 1.1, 2.1]),
];

pub const MIXTURE_SIGMA0: [[f64; 3]; 3] = [[4.4, 1.3, -2.8], [1.3, 3.2, 1.3], [-2.8, 1.3, 3.5]];

impl GaussianMixtureSpec {
    /// The reference parameterization, probabilities divided by their sum
    /// so they form a distribution.
    pub fn reference(n: usize, seed: u64) -> Self {
        let raw = Self::reference_raw(n, seed);
        let (spec, _) = raw.renormalized();
        spec
    }

    /// The reference parameterization with the rounded probabilities as
    /// listed. Fails validation until [`GaussianMixtureSpec::renormalized`].
    pub fn reference_raw(n: usize, seed: u64) -> Self {
        let components = MIXTURE_PATTERNS
            .iter()
            .map(|(r, p, h)| MixtureComponent {
                pattern: r.iter().map(|&b| b == 1).collect(),
                prob: *p,
                h: h.to_vec(),
            })
            .collect();
        Self {
            components,
            sigma0: MIXTURE_SIGMA0.iter().map(|r| r.to_vec()).collect(),
            n,
            seed,
        }
    }

    /// Copy with probabilities scaled to sum to one; also returns the
    /// original sum.
    pub fn renormalized(&self) -> (Self, f64) {
        let total: f64 = self.components.iter().map(|c| c.prob).sum();
        let mut out = self.clone();
        for c in &mut out.components {
            c.prob /= total;
        }
        (out, total)
    }

    pub fn dim(&self) -> usize {
        self.sigma0.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.dim();
        let mut problems = Vec::new();
        if self.components.is_empty() {
            problems.push("at least one component is required".to_string());
        }
        if self.sigma0.iter().any(|r| r.len() != p) {
            problems.push("sigma0 must be square".to_string());
        }
        for (i, c) in self.components.iter().enumerate() {
            if c.pattern.len() != p || c.h.len() != p {
                problems.push(format!("component {i} has pattern/h of the wrong length"));
            }
            if !(c.prob >= 0.0) {
                problems.push(format!("component {i} has negative probability {}", c.prob));
            }
        }
        let total: f64 = self.components.iter().map(|c| c.prob).sum();
        if (total - 1.0).abs() > 1e-9 {
            problems.push(format!("pattern probabilities sum to {total}, not 1"));
        }
        for i in 0..p {
            for j in 0..i {
                if self.sigma0.get(i).and_then(|r| r.get(j)) != self.sigma0.get(j).and_then(|r| r.get(i)) {
                    problems.push("sigma0 must be symmetric".to_string());
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Spec(problems.join("; ")));
        }
        cholesky(&self.sigma0)?;
        Ok(())
    }

    /// Component mean `Σ₀ h(r)`.
    pub fn component_mean(&self, k: usize) -> Vec<f64> {
        let h = &self.components[k].h;
        self.sigma0
            .iter()
            .map(|row| row.iter().zip(h).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Closed-form `E[X] = Σ_r p(r) Σ₀ h(r)`.
    pub fn true_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (k, c) in self.components.iter().enumerate() {
            for (mi, v) in m.iter_mut().zip(self.component_mean(k)) {
                *mi += c.prob * v;
            }
        }
        m
    }
}

/// Lower-triangular `L` with `L Lᵀ = a`; fails unless `a` is positive definite.
pub fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 0.0) {
                    return Err(Error::Domain("covariance matrix is not positive definite".into()));
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

#[derive(Debug, Clone)]
pub struct MixtureSample {
    /// Complete values; the mask is the sampled pattern. Rows whose pattern
    /// is all-missing stay in the table and are excluded at training time.
    pub table: DataTable,
    /// Component index per row.
    pub components: Vec<usize>,
}

pub fn gen_gaussian_mixture(spec: &GaussianMixtureSpec) -> Result<MixtureSample> {
    spec.validate()?;
    let p = spec.dim();
    let l = cholesky(&spec.sigma0)?;
    let means: Vec<Vec<f64>> = (0..spec.components.len()).map(|k| spec.component_mean(k)).collect();
    let mut cumulative = Vec::with_capacity(spec.components.len());
    let mut acc = 0.0;
    for c in &spec.components {
        acc += c.prob;
        cumulative.push(acc);
    }

    let mut rng = SeededRng::new(spec.seed);
    let mut values = Array2::zeros((spec.n, p));
    let mut mask = Array2::from_elem((spec.n, p), false);
    let mut components = Vec::with_capacity(spec.n);
    let mut eps = vec![0.0; p];
    for i in 0..spec.n {
        let u = rng.uniform() * acc;
        let k = cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1);
        components.push(k);
        rng.fill_normal(&mut eps);
        for a in 0..p {
            let noise: f64 = (0..=a).map(|b| l[a][b] * eps[b]).sum();
            values[[i, a]] = means[k][a] + noise;
            mask[[i, a]] = spec.components[k].pattern[a];
        }
    }
    Ok(MixtureSample {
        table: DataTable::new(values, mask)?,
        components,
    })
}
