//! The importance-weighted deep latent variable model for MNAR data.
//!
//! Generative side: `z ~ N(0, I_κ₁)`, `x | z ~ N(f_θ(z), γ I)`,
//! `z̃ ~ N(0, I_κ₂)` and `r_j | x, z̃ ~ Bernoulli(σ(f_ψ(x_{-j}, z̃)_j))`.
//! Inference side: one encoder network maps the zero-filled row to the
//! means and raw scales of the diagonal Gaussians `q(z | ·)` and `q(z̃ | ·)`.
//!
//! For a row with `K` reparameterized draws the log importance weights are
//!
//! ```text
//! log w_k = log p(x_obs | z_k) + log p(r | x̄_k, z̃_k)
//!         + log p(z_k) + log p(z̃_k) - log q(z_k) - log q(z̃_k)
//! ```
//!
//! where `x̄_k` fills the missing entries with a decoder draw. The training
//! objective per row is `L̂_K = logsumexp(log w) - log K`.
//!
//! The forward pass is batched over rows and samples (sample `s = i·K + k`)
//! and the gradient is derived by hand; all randomness enters through an
//! explicit [`BatchNoise`] so the objective is a deterministic function of
//! the parameters for a fixed noise draw.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::math::{logsumexp, normal_log_density, sigmoid, softplus, softplus_inv};
use crate::missingness::Linearity;
use crate::nn::gaussian::SCALE_FLOOR;
use crate::nn::{positive_scale, positive_scale_grad, Mlp, MlpCache, ParamTensors};
use crate::rng::{RngState, SeededRng};

/// Lower bound on the observation variance.
pub const GAMMA_FLOOR: f64 = 1e-4;
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataDecoder {
    #[default]
    Gaussian,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn default_hidden() -> usize {
    128
}
fn default_k() -> usize {
    20
}
fn default_gamma() -> f64 {
    0.25
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub p: usize,
    /// Data latent dimension κ₁.
    pub kappa1: usize,
    /// Missingness latent dimension κ₂; 0 removes `z̃` altogether.
    #[serde(default = "one")]
    pub kappa2: usize,
    #[serde(default = "default_hidden")]
    pub hidden_width: usize,
    /// Hidden layers in the encoder and in the data decoder.
    #[serde(default = "two")]
    pub hidden_layers: usize,
    /// Importance samples per row in the objective.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Initial observation variance γ (learned afterwards).
    #[serde(default = "default_gamma")]
    pub gamma_init: f64,
    #[serde(default)]
    pub missingness_decoder: Linearity,
    #[serde(default = "yes")]
    pub no_self_censoring: bool,
    /// Append the mask to the encoder input.
    #[serde(default)]
    pub mask_channel: bool,
    #[serde(default)]
    pub data_decoder: DataDecoder,
}

impl ModelConfig {
    pub fn new(p: usize, kappa1: usize) -> Self {
        Self {
            p,
            kappa1,
            kappa2: 1,
            hidden_width: 128,
            hidden_layers: 2,
            k: 20,
            gamma_init: 0.25,
            missingness_decoder: Linearity::Linear,
            no_self_censoring: true,
            mask_channel: false,
            data_decoder: DataDecoder::Gaussian,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.p == 0 {
            out.push("model.p must be at least 1".into());
        }
        if self.kappa1 == 0 {
            out.push("model.kappa1 must be at least 1".into());
        }
        if self.k == 0 {
            out.push("model.k must be at least 1".into());
        }
        if self.hidden_width == 0 {
            out.push("model.hidden_width must be at least 1".into());
        }
        if !(self.gamma_init > GAMMA_FLOOR && self.gamma_init.is_finite()) {
            out.push(format!("model.gamma_init must be finite and above {GAMMA_FLOOR}"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn encoder_input(&self) -> usize {
        if self.mask_channel {
            2 * self.p
        } else {
            self.p
        }
    }

    fn latent_total(&self) -> usize {
        self.kappa1 + self.kappa2
    }

    fn encoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.encoder_input()];
        d.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        d.push(2 * self.latent_total());
        d
    }

    fn decoder_dims(&self) -> Vec<usize> {
        let mut d = vec![self.kappa1];
        d.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        d.push(self.p);
        d
    }

    fn missingness_dims(&self) -> Vec<usize> {
        match self.missingness_decoder {
            Linearity::Linear => vec![self.p + self.kappa2, self.p],
            Linearity::Nonlinear => vec![self.p + self.kappa2, self.hidden_width, self.p],
        }
    }

    /// Whether the missingness decoder is evaluated once per indicator with
    /// that indicator's own variable zeroed.
    fn remasks(&self) -> bool {
        self.no_self_censoring && self.missingness_decoder == Linearity::Nonlinear
    }

    /// Whether the `(j, j)` weights of a linear missingness decoder are
    /// pinned to zero.
    fn zero_diagonal(&self) -> bool {
        self.no_self_censoring && self.missingness_decoder == Linearity::Linear
    }
}

/// All learnable parameters. The encoder jointly produces the `z` and `z̃`
/// posteriors; its output is laid out `[μ_z, μ_z̃, raw_z, raw_z̃]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub missingness: Mlp,
    /// `γ = max(softplus(raw_gamma), 1e-4)`.
    pub raw_gamma: f64,
    /// Epochs of training these parameters have seen.
    #[serde(default)]
    pub epochs_trained: usize,
}

impl ModelParams {
    pub fn new(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut params = Self {
            config: config.clone(),
            encoder: Mlp::new(&config.encoder_dims(), rng)?,
            decoder: Mlp::new(&config.decoder_dims(), rng)?,
            missingness: Mlp::new(&config.missingness_dims(), rng)?,
            raw_gamma: softplus_inv(config.gamma_init),
            epochs_trained: 0,
        };
        params.enforce_structure();
        Ok(params)
    }

    /// Every weight zero, γ at its initial value.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            encoder: Mlp::zeros(&config.encoder_dims())?,
            decoder: Mlp::zeros(&config.decoder_dims())?,
            missingness: Mlp::zeros(&config.missingness_dims())?,
            raw_gamma: softplus_inv(config.gamma_init),
            epochs_trained: 0,
        })
    }

    /// Zero-valued container with the same shapes, used for gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut()
            .into_iter()
            .for_each(|t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn gamma(&self) -> f64 {
        positive_scale(self.raw_gamma, GAMMA_FLOOR)
    }

    pub fn p(&self) -> usize {
        self.config.p
    }

    /// Pins the self-censoring weights of a linear missingness decoder to 0.
    pub fn enforce_structure(&mut self) {
        if self.config.zero_diagonal() {
            let w = &mut self.missingness.layers_mut()[0].weight;
            for j in 0..self.config.p {
                w[[j, j]] = 0.0;
            }
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        for (name, net, dims) in [
            ("encoder", &self.encoder, c.encoder_dims()),
            ("decoder", &self.decoder, c.decoder_dims()),
            ("missingness", &self.missingness, c.missingness_dims()),
        ] {
            if net.layer_dims() != dims.as_slice() {
                return Err(Error::Shape(format!(
                    "{name} has layers {:?}, config implies {dims:?}",
                    net.layer_dims()
                )));
            }
        }
        Ok(())
    }

    /// Posterior parameters for one zero-filled row (with the mask appended
    /// when the config asks for it).
    pub fn encode(&self, row: &[f64]) -> Result<Encoding> {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("encoder input contains non-finite values".into()));
        }
        let out = self.encoder.forward(row)?;
        let (k1, k2) = (self.config.kappa1, self.config.kappa2);
        let kt = k1 + k2;
        let scale = |v: &[f64]| v.iter().map(|&r| positive_scale(r, SCALE_FLOOR)).collect();
        Ok(Encoding {
            mu_z: out[..k1].to_vec(),
            mu_zt: out[k1..kt].to_vec(),
            sigma_z: scale(&out[kt..kt + k1]),
            sigma_zt: scale(&out[kt + k1..]),
        })
    }

    /// Mean of `p(x | z)`; the covariance is `γ I`.
    pub fn decode_data(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decoder.forward(z)
    }

    /// Logits of `p(r_j = 1 | x̄, z̃)` for every `j`.
    pub fn missingness_logits(&self, x_bar: &[f64], z_tilde: &[f64]) -> Result<Vec<f64>> {
        let (p, k2) = (self.config.p, self.config.kappa2);
        if x_bar.len() != p || z_tilde.len() != k2 {
            return Err(Error::Shape(format!(
                "missingness decoder expects x̄ of length {p} and z̃ of length {k2}, got {} and {}",
                x_bar.len(),
                z_tilde.len()
            )));
        }
        let x = Array2::from_shape_vec((1, p), x_bar.to_vec()).unwrap();
        let zt = Array2::from_shape_vec((1, k2), z_tilde.to_vec()).unwrap();
        let (_, logits) = self.missingness_forward(x, zt.view());
        Ok(logits.into_raw_vec_and_offset().0)
    }

    /// Observation probabilities `π_j = σ(logit_j)`.
    pub fn decode_missingness(&self, x_bar: &[f64], z_tilde: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .missingness_logits(x_bar, z_tilde)?
            .into_iter()
            .map(sigmoid)
            .collect())
    }

    /// Builds the missingness input for a batch and returns the cache and the
    /// `(rows × p)` logits.
    fn missingness_forward(&self, x_bar: Array2<f64>, z_tilde: ArrayView2<f64>) -> (MlpCache, Array2<f64>) {
        let (n, p, k2) = (x_bar.nrows(), self.config.p, self.config.kappa2);
        if self.config.remasks() {
            let mut input = Array2::zeros((n * p, p + k2));
            for s in 0..n {
                for j in 0..p {
                    let mut row = input.row_mut(s * p + j);
                    row.slice_mut(s![..p]).assign(&x_bar.row(s));
                    row[j] = 0.0;
                    row.slice_mut(s![p..]).assign(&z_tilde.row(s));
                }
            }
            let cache = self.missingness.forward_cached(input);
            let out = cache.output();
            let logits = Array2::from_shape_fn((n, p), |(s, j)| out[[s * p + j, j]]);
            (cache, logits)
        } else {
            let mut input = Array2::zeros((n, p + k2));
            input.slice_mut(s![.., ..p]).assign(&x_bar);
            input.slice_mut(s![.., p..]).assign(&z_tilde);
            let cache = self.missingness.forward_cached(input);
            let logits = cache.output().clone();
            (cache, logits)
        }
    }

    /// Batched forward pass over `n` rows with `noise.k` samples each.
    ///
    /// `values` may hold anything (including NaN) at unobserved positions;
    /// those cells are never read. With `with_missingness = false` the
    /// missingness decoder is skipped and its log-likelihood is reported as
    /// zero.
    pub fn forward(
        &self,
        values: ArrayView2<f64>,
        mask: ArrayView2<bool>,
        noise: &BatchNoise,
        with_missingness: bool,
    ) -> Result<ForwardPass> {
        let c = &self.config;
        let (n, p) = values.dim();
        if p != c.p || mask.dim() != (n, p) {
            return Err(Error::Shape(format!(
                "batch is {n}x{p} with mask {:?}, model expects width {}",
                mask.dim(),
                c.p
            )));
        }
        let k = noise.k;
        if k == 0
            || noise.eps_z.dim() != (n * k, c.kappa1)
            || noise.eps_zt.dim() != (n * k, c.kappa2)
            || noise.eps_x.dim() != (n * k, p)
        {
            return Err(Error::Shape(format!("noise does not match {n} rows with K = {k}")));
        }
        let (k1, k2) = (c.kappa1, c.kappa2);
        let kt = k1 + k2;

        let r = mask.mapv(|m| if m { 1.0 } else { 0.0 });
        let mut x_obs = Array2::zeros((n, p));
        Zip::from(&mut x_obs).and(values).and(mask).for_each(|d, &v, &m| {
            if m {
                *d = v;
            }
        });
        if x_obs.iter().any(|v: &f64| !v.is_finite()) {
            return Err(Error::Numeric("observed values must be finite".into()));
        }

        let enc_in = if c.mask_channel {
            ndarray::concatenate(Axis(1), &[x_obs.view(), r.view()]).unwrap()
        } else {
            x_obs.clone()
        };
        let enc_cache = self.encoder.forward_cached(enc_in);
        let enc_out = enc_cache.output();
        if enc_out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("encoder produced non-finite output".into()));
        }
        let sigma = enc_out.slice(s![.., kt..]).mapv(|v| positive_scale(v, SCALE_FLOOR));

        let mut z = Array2::zeros((n * k, k1));
        let mut zt = Array2::zeros((n * k, k2));
        for i in 0..n {
            for kk in 0..k {
                let sidx = i * k + kk;
                for d in 0..k1 {
                    z[[sidx, d]] = enc_out[[i, d]] + sigma[[i, d]] * noise.eps_z[[sidx, d]];
                }
                for d in 0..k2 {
                    zt[[sidx, d]] = enc_out[[i, k1 + d]] + sigma[[i, k1 + d]] * noise.eps_zt[[sidx, d]];
                }
            }
        }

        let mut log_prior_q = vec![0.0; n * k];
        for i in 0..n {
            let log_sigma: f64 = sigma.row(i).iter().map(|s| s.ln()).sum();
            for kk in 0..k {
                let sidx = i * k + kk;
                let mut acc = log_sigma;
                for d in 0..k1 {
                    let e = noise.eps_z[[sidx, d]];
                    acc += 0.5 * (e * e - z[[sidx, d]] * z[[sidx, d]]);
                }
                for d in 0..k2 {
                    let e = noise.eps_zt[[sidx, d]];
                    acc += 0.5 * (e * e - zt[[sidx, d]] * zt[[sidx, d]]);
                }
                log_prior_q[sidx] = acc;
            }
        }

        let dec_cache = self.decoder.forward_cached(z);
        let mu_x = dec_cache.output();
        let gamma = self.gamma();
        let sg = gamma.sqrt();
        let mut x_hat = mu_x.clone();
        x_hat.scaled_add(sg, &noise.eps_x);

        let mut log_px = vec![0.0; n * k];
        let mut x_bar = x_hat.clone();
        for i in 0..n {
            for kk in 0..k {
                let sidx = i * k + kk;
                let mut acc = 0.0;
                for j in 0..p {
                    if mask[[i, j]] {
                        acc += normal_log_density(x_obs[[i, j]], mu_x[[sidx, j]], gamma);
                        x_bar[[sidx, j]] = x_obs[[i, j]];
                    }
                }
                log_px[sidx] = acc;
            }
        }

        let mut log_pr = vec![0.0; n * k];
        let miss = if with_missingness {
            let (cache, logits) = self.missingness_forward(x_bar.clone(), zt.view());
            for i in 0..n {
                for kk in 0..k {
                    let sidx = i * k + kk;
                    log_pr[sidx] = (0..p)
                        .map(|j| r[[i, j]] * logits[[sidx, j]] - softplus(logits[[sidx, j]]))
                        .sum();
                }
            }
            Some((cache, logits))
        } else {
            None
        };

        let mut log_w = Array2::zeros((n, k));
        for i in 0..n {
            for kk in 0..k {
                let sidx = i * k + kk;
                let lw = log_px[sidx] + log_pr[sidx] + log_prior_q[sidx];
                if !lw.is_finite() {
                    return Err(Error::Numeric(format!(
                        "log importance weight of row {i}, sample {kk} is {lw}: log p(x_obs|z) = {}, log p(r|x,z̃) = {}, log p(z,z̃) - log q = {}",
                        log_px[sidx], log_pr[sidx], log_prior_q[sidx]
                    )));
                }
                log_w[[i, kk]] = lw;
            }
        }

        Ok(ForwardPass {
            k,
            x_obs,
            r,
            sigma,
            enc_cache,
            z_tilde: zt,
            dec_cache,
            x_hat,
            x_bar,
            miss,
            log_px,
            log_pr,
            log_prior_q,
            log_w,
        })
    }

    /// Per-row `L̂_K` for a batch.
    pub fn objective(&self, values: ArrayView2<f64>, mask: ArrayView2<bool>, noise: &BatchNoise) -> Result<Vec<f64>> {
        Ok(self.forward(values, mask, noise, true)?.lhat())
    }

    /// Adds `scale · ∇ Σ_i L̂_K(row i)` into `grads`. `fwd` must come from
    /// [`ModelParams::forward`] on these parameters with the missingness
    /// decoder enabled.
    pub fn backward(&self, fwd: &ForwardPass, noise: &BatchNoise, scale: f64, grads: &mut ModelParams) {
        let c = &self.config;
        let (n, p) = fwd.x_obs.dim();
        let k = fwd.k;
        let (k1, k2) = (c.kappa1, c.kappa2);
        let kt = k1 + k2;
        let (miss_cache, logits) = fwd.miss.as_ref().expect("backward needs the missingness pass");

        // dObjective / dlog w for every sample
        let mut g = vec![0.0; n * k];
        for i in 0..n {
            let row = fwd.log_w.row(i);
            let lse = logsumexp(row.as_slice().unwrap());
            for kk in 0..k {
                g[i * k + kk] = scale * (row[kk] - lse).exp();
            }
        }

        // missingness decoder
        let d_logit = Array2::from_shape_fn((n * k, p), |(sidx, j)| {
            g[sidx] * (fwd.r[[sidx / k, j]] - sigmoid(logits[[sidx, j]]))
        });
        let mut d_xbar = Array2::<f64>::zeros((n * k, p));
        let mut d_zt = Array2::<f64>::zeros((n * k, k2));
        if c.remasks() {
            let mut out_grad = Array2::zeros((n * k * p, p));
            for sidx in 0..n * k {
                for j in 0..p {
                    out_grad[[sidx * p + j, j]] = d_logit[[sidx, j]];
                }
            }
            let d_in = self.missingness.backward(miss_cache, out_grad, &mut grads.missingness);
            for sidx in 0..n * k {
                for j in 0..p {
                    let row = d_in.row(sidx * p + j);
                    for i in 0..p {
                        if i != j {
                            d_xbar[[sidx, i]] += row[i];
                        }
                    }
                    for d in 0..k2 {
                        d_zt[[sidx, d]] += row[p + d];
                    }
                }
            }
        } else {
            let d_in = self.missingness.backward(miss_cache, d_logit, &mut grads.missingness);
            d_xbar.assign(&d_in.slice(s![.., ..p]));
            d_zt.assign(&d_in.slice(s![.., p..]));
        }
        grads.enforce_structure();

        // data decoder and γ
        let mu_x = fwd.dec_cache.output();
        let gamma = self.gamma();
        let sg = gamma.sqrt();
        let mut d_mu = Array2::zeros((n * k, p));
        let mut d_gamma = 0.0;
        for sidx in 0..n * k {
            let i = sidx / k;
            for j in 0..p {
                if fwd.r[[i, j]] == 1.0 {
                    let diff = fwd.x_obs[[i, j]] - mu_x[[sidx, j]];
                    d_mu[[sidx, j]] = g[sidx] * diff / gamma;
                    d_gamma += g[sidx] * (-0.5 / gamma + 0.5 * diff * diff / (gamma * gamma));
                } else {
                    let dx = d_xbar[[sidx, j]];
                    d_mu[[sidx, j]] = dx;
                    d_gamma += dx * noise.eps_x[[sidx, j]] / (2.0 * sg);
                }
            }
        }
        grads.raw_gamma += d_gamma * positive_scale_grad(self.raw_gamma, GAMMA_FLOOR);
        let mut d_z = self.decoder.backward(&fwd.dec_cache, d_mu, &mut grads.decoder);

        // priors
        let z = fwd.dec_cache.input();
        for sidx in 0..n * k {
            for d in 0..k1 {
                d_z[[sidx, d]] -= g[sidx] * z[[sidx, d]];
            }
            for d in 0..k2 {
                d_zt[[sidx, d]] -= g[sidx] * fwd.z_tilde[[sidx, d]];
            }
        }

        // reparameterization and entropy back to the encoder outputs
        let enc_out = fwd.enc_cache.output();
        let mut d_enc = Array2::zeros((n, 2 * kt));
        for i in 0..n {
            let g_row: f64 = g[i * k..(i + 1) * k].iter().sum();
            for kk in 0..k {
                let sidx = i * k + kk;
                for d in 0..k1 {
                    d_enc[[i, d]] += d_z[[sidx, d]];
                    d_enc[[i, kt + d]] += d_z[[sidx, d]] * noise.eps_z[[sidx, d]];
                }
                for d in 0..k2 {
                    d_enc[[i, k1 + d]] += d_zt[[sidx, d]];
                    d_enc[[i, kt + k1 + d]] += d_zt[[sidx, d]] * noise.eps_zt[[sidx, d]];
                }
            }
            for d in 0..kt {
                let raw = enc_out[[i, kt + d]];
                let d_sigma = d_enc[[i, kt + d]] + g_row / fwd.sigma[[i, d]];
                d_enc[[i, kt + d]] = d_sigma * positive_scale_grad(raw, SCALE_FLOOR);
            }
        }
        self.encoder.backward(&fwd.enc_cache, d_enc, &mut grads.encoder);
    }

    /// Per-row `L̂_K` and `scale · ∇ Σ_i L̂_K` added into `grads`.
    pub fn objective_and_gradient(
        &self,
        values: ArrayView2<f64>,
        mask: ArrayView2<bool>,
        noise: &BatchNoise,
        scale: f64,
        grads: &mut ModelParams,
    ) -> Result<Vec<f64>> {
        let fwd = self.forward(values, mask, noise, true)?;
        self.backward(&fwd, noise, scale, grads);
        Ok(fwd.lhat())
    }

    /// `K` importance samples for one row.
    pub fn importance_weights(
        &self,
        row: &[f64],
        mask: &[bool],
        rng: &mut SeededRng,
        k: usize,
    ) -> Result<ImportanceBatch> {
        let p = self.config.p;
        if row.len() != p || mask.len() != p {
            return Err(Error::Shape(format!("row and mask must have length {p}")));
        }
        if k == 0 {
            return Err(Error::Domain("K must be at least 1".into()));
        }
        let values = ArrayView2::from_shape((1, p), row).unwrap();
        let mask = ArrayView2::from_shape((1, p), mask).unwrap();
        let noise = BatchNoise::draw(1, k, &self.config, rng);
        let fwd = self.forward(values, mask, &noise, true)?;
        Ok(ImportanceBatch {
            z: fwd.dec_cache.input().clone(),
            z_tilde: fwd.z_tilde,
            x_hat: fwd.x_hat,
            x_bar: fwd.x_bar,
            log_w: fwd.log_w.row(0).to_owned(),
            log_px: fwd.log_px,
            log_pr: fwd.log_pr,
            log_prior_q: fwd.log_prior_q,
        })
    }

    /// Writes a checkpoint without preprocessing statistics.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>, rng_state: Option<RngState>) -> Result<()> {
        let mut ckpt = Checkpoint::new(self.clone());
        ckpt.rng_state = rng_state;
        ckpt.save(path)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::load(path)
    }
}

impl ParamTensors for ModelParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.encoder.tensors();
        t.extend(self.decoder.tensors());
        t.extend(self.missingness.tensors());
        t.push(std::slice::from_ref(&self.raw_gamma));
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.decoder.tensors_mut());
        t.extend(self.missingness.tensors_mut());
        t.push(std::slice::from_mut(&mut self.raw_gamma));
        t
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (prefix, net) in [
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("missingness", &self.missingness),
        ] {
            names.extend(net.tensor_names().into_iter().map(|n| format!("{prefix}.{n}")));
        }
        names.push("raw_gamma".into());
        names
    }
}

/// On-disk form of a model (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub software_version: String,
    pub params: ModelParams,
    pub rng_state: Option<RngState>,
    /// Column statistics the model's inputs were standardized with.
    #[serde(default)]
    pub standardization: Option<Standardization>,
    /// Header of the training table, reused for generated rows.
    #[serde(default)]
    pub column_names: Option<Vec<String>>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            params,
            rng_state: None,
            standardization: None,
            column_names: None,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    /// Reads and checks version, shapes, finiteness and stored statistics.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Spec(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT})",
                ckpt.format_version
            )));
        }
        ckpt.params.config.validate()?;
        ckpt.params.check_shapes()?;
        if !ckpt.params.all_finite() {
            return Err(Error::Numeric("checkpoint holds non-finite parameters".into()));
        }
        if let Some(s) = &ckpt.standardization {
            if s.means.len() != ckpt.params.p() || s.stds.len() != ckpt.params.p() {
                return Err(Error::Shape("standardization does not match the model width".into()));
            }
        }
        if ckpt.column_names.as_ref().is_some_and(|c| c.len() != ckpt.params.p()) {
            return Err(Error::Shape("column names do not match the model width".into()));
        }
        Ok(ckpt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub mu_z: Vec<f64>,
    pub mu_zt: Vec<f64>,
    pub sigma_z: Vec<f64>,
    pub sigma_zt: Vec<f64>,
}

/// Standard-normal noise for a batch of `rows` rows with `k` samples each.
#[derive(Debug, Clone)]
pub struct BatchNoise {
    pub k: usize,
    pub eps_z: Array2<f64>,
    pub eps_zt: Array2<f64>,
    pub eps_x: Array2<f64>,
}

impl BatchNoise {
    /// Per sample, in order: `ε_z`, `ε_z̃`, `ε_x`.
    pub fn draw(rows: usize, k: usize, config: &ModelConfig, rng: &mut SeededRng) -> Self {
        let m = rows * k;
        let mut eps_z = Array2::zeros((m, config.kappa1));
        let mut eps_zt = Array2::zeros((m, config.kappa2));
        let mut eps_x = Array2::zeros((m, config.p));
        for sidx in 0..m {
            rng.fill_normal(eps_z.row_mut(sidx).as_slice_mut().unwrap());
            rng.fill_normal(eps_zt.row_mut(sidx).as_slice_mut().unwrap());
            rng.fill_normal(eps_x.row_mut(sidx).as_slice_mut().unwrap());
        }
        Self {
            k,
            eps_z,
            eps_zt,
            eps_x,
        }
    }
}

/// Everything the backward pass and the imputer need from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub k: usize,
    x_obs: Array2<f64>,
    r: Array2<f64>,
    sigma: Array2<f64>,
    enc_cache: MlpCache,
    pub z_tilde: Array2<f64>,
    dec_cache: MlpCache,
    /// Decoder draws `x̂` for every sample (`n·K × p`).
    pub x_hat: Array2<f64>,
    /// `x̂` with observed entries replaced by the data.
    pub x_bar: Array2<f64>,
    miss: Option<(MlpCache, Array2<f64>)>,
    pub log_px: Vec<f64>,
    pub log_pr: Vec<f64>,
    pub log_prior_q: Vec<f64>,
    /// `n × K` log importance weights.
    pub log_w: Array2<f64>,
}

impl ForwardPass {
    pub fn z(&self) -> &Array2<f64> {
        self.dec_cache.input()
    }

    pub fn mu_x(&self) -> &Array2<f64> {
        self.dec_cache.output()
    }

    pub fn lhat(&self) -> Vec<f64> {
        self.log_w
            .rows()
            .into_iter()
            .map(|r| objective_from_log_weights(r.as_slice().unwrap()))
            .collect()
    }
}

/// `K` importance samples for one row.
#[derive(Debug, Clone)]
pub struct ImportanceBatch {
    pub z: Array2<f64>,
    pub z_tilde: Array2<f64>,
    pub x_hat: Array2<f64>,
    pub x_bar: Array2<f64>,
    pub log_w: Array1<f64>,
    pub log_px: Vec<f64>,
    pub log_pr: Vec<f64>,
    pub log_prior_q: Vec<f64>,
}

/// `logsumexp(log w) - log K`.
pub fn objective_from_log_weights(log_w: &[f64]) -> f64 {
    logsumexp(log_w) - (log_w.len() as f64).ln()
}

/// `L̂_K` of one row's importance batch.
pub fn objective_lhat_k(batch: &ImportanceBatch) -> f64 {
    objective_from_log_weights(batch.log_w.as_slice().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_difference, relative_error, FD_STEP};
    use ndarray::array;

    fn small_config(lin: Linearity) -> ModelConfig {
        let mut c = ModelConfig::new(3, 2);
        c.hidden_width = 8;
        c.k = 3;
        c.missingness_decoder = lin;
        c
    }

    fn toy_batch() -> (Array2<f64>, Array2<bool>) {
        let x = array![[0.3, -1.2, 0.8], [1.5, f64::NAN, -0.4], [f64::NAN, 0.2, f64::NAN]];
        let m = array![[true, true, true], [true, false, true], [false, true, false]];
        (x, m)
    }

    #[test]
    fn zero_encoder_gives_softplus_zero_scale() {
        let c = small_config(Linearity::Linear);
        let p = ModelParams::zeros(&c).unwrap();
        let e = p.encode(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(e.mu_z, vec![0.0; 2]);
        assert_eq!(e.mu_zt.len(), 1);
        assert_eq!(e.sigma_z, vec![std::f64::consts::LN_2; 2]);
        assert_eq!(e.sigma_zt, vec![std::f64::consts::LN_2]);
    }

    #[test]
    fn encoder_rejects_non_finite() {
        let p = ModelParams::zeros(&small_config(Linearity::Linear)).unwrap();
        assert!(matches!(p.encode(&[1.0, f64::NAN, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_decoders() {
        let p = ModelParams::zeros(&small_config(Linearity::Nonlinear)).unwrap();
        assert_eq!(p.decode_data(&[0.4, -2.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(p.decode_missingness(&[1.0, 2.0, 3.0], &[0.5]).unwrap(), vec![0.5; 3]);
    }

    #[test]
    fn density_at_mean() {
        let p = ModelParams::zeros(&small_config(Linearity::Linear)).unwrap();
        let gamma = p.gamma();
        assert!((gamma - 0.25).abs() < 1e-15);
        let mu = p.decode_data(&[0.1, 0.2]).unwrap();
        let ld: f64 = mu.iter().map(|&m| normal_log_density(m, m, gamma)).sum();
        let expect = -1.5 * (2.0 * std::f64::consts::PI * gamma).ln();
        assert!((ld - expect).abs() < 1e-12);
    }

    #[test]
    fn own_variable_never_moves_its_indicator() {
        let mut rng = SeededRng::new(4);
        for lin in [Linearity::Linear, Linearity::Nonlinear] {
            let p = ModelParams::new(&small_config(lin), &mut rng).unwrap();
            for _ in 0..50 {
                let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
                let zt = [rng.normal()];
                let base = p.missingness_logits(&x, &zt).unwrap();
                for j in 0..3 {
                    let mut y = x.clone();
                    y[j] += 1.0;
                    assert_eq!(p.missingness_logits(&y, &zt).unwrap()[j], base[j]);
                }
            }
        }
    }

    #[test]
    fn self_censoring_ablation_reacts() {
        let mut rng = SeededRng::new(5);
        let mut c = small_config(Linearity::Linear);
        c.no_self_censoring = false;
        let p = ModelParams::new(&c, &mut rng).unwrap();
        let a = p.missingness_logits(&[0.0, 0.0, 0.0], &[0.0]).unwrap();
        let b = p.missingness_logits(&[1.0, 0.0, 0.0], &[0.0]).unwrap();
        assert_ne!(a[0], b[0]);
    }

    #[test]
    fn complete_row_keeps_data_in_every_sample() {
        let mut rng = SeededRng::new(6);
        let p = ModelParams::new(&small_config(Linearity::Linear), &mut rng).unwrap();
        let b = p
            .importance_weights(&[0.1, 0.2, 0.3], &[true; 3], &mut rng, 20)
            .unwrap();
        for row in b.x_bar.rows() {
            assert_eq!(row.to_vec(), vec![0.1, 0.2, 0.3]);
        }
        assert_eq!(b.log_w.len(), 20);
    }

    #[test]
    fn prior_matching_encoder_cancels_latent_terms() {
        let mut rng = SeededRng::new(7);
        let c = small_config(Linearity::Nonlinear);
        let mut p = ModelParams::new(&c, &mut rng).unwrap();
        let out = p.encoder.layers_mut().last_mut().unwrap();
        out.weight.fill(0.0);
        let kt = c.kappa1 + c.kappa2;
        for d in 0..kt {
            out.bias[d] = 0.0;
            out.bias[kt + d] = softplus_inv(1.0);
        }
        let b = p
            .importance_weights(&[0.5, -0.3, 0.0], &[true, true, false], &mut rng, 10)
            .unwrap();
        for k in 0..10 {
            let direct = b.log_px[k] + b.log_pr[k];
            assert!(b.log_prior_q[k].abs() < 1e-10);
            assert!((b.log_w[k] - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn objective_examples() {
        let c = 0.7f64;
        assert!((objective_from_log_weights(&[c.ln(); 5]) - c.ln()).abs() < 1e-15);
        assert_eq!(objective_from_log_weights(&[-3.2]), -3.2);
        let expect = ((1.0 + std::f64::consts::E) / 2.0).ln();
        assert!((objective_from_log_weights(&[0.0, 1.0]) - expect).abs() < 1e-15);
        let wide = objective_from_log_weights(&[-900.0, 0.0]);
        assert!(wide.is_finite() && (wide + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unobserved_cells_are_never_read() {
        let mut rng = SeededRng::new(8);
        let p = ModelParams::new(&small_config(Linearity::Linear), &mut rng).unwrap();
        let (x, m) = toy_batch();
        let noise = BatchNoise::draw(3, 4, &p.config, &mut rng);
        let a = p.objective(x.view(), m.view(), &noise).unwrap();
        let mut y = x.clone();
        Zip::from(&mut y).and(&m).for_each(|v, &o| {
            if !o {
                *v = 1e9;
            }
        });
        let b = p.objective(y.view(), m.view(), &noise).unwrap();
        assert_eq!(a, b);
    }

    fn check_gradients(c: &ModelConfig, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let mut p = ModelParams::new(c, &mut rng).unwrap();
        let (x, m) = toy_batch();
        let noise = BatchNoise::draw(3, c.k, c, &mut rng);
        let mut grads = p.zeros_like();
        p.objective_and_gradient(x.view(), m.view(), &noise, 1.0, &mut grads)
            .unwrap();
        let n = p.num_scalars();
        let pinned: Vec<String> = if c.zero_diagonal() {
            (0..c.p)
                .map(|j| format!("missingness.layer0.weight[{}]", j * c.p + j))
                .collect()
        } else {
            Vec::new()
        };
        for idx in 0..n {
            if pinned.contains(&p.flat_name(idx)) {
                assert_eq!(grads.get_flat(idx), 0.0);
                continue;
            }
            let analytic = grads.get_flat(idx);
            let numeric = central_difference(&mut p, idx, FD_STEP, |q| {
                q.objective(x.view(), m.view(), &noise).unwrap().iter().sum()
            });
            let err = relative_error(analytic, numeric);
            assert!(
                err < 1e-4 || (analytic - numeric).abs() < 1e-7,
                "{}: {analytic} vs {numeric}",
                p.flat_name(idx)
            );
        }
    }

    #[test]
    fn gradients_linear_missingness() {
        check_gradients(&small_config(Linearity::Linear), 11);
    }

    #[test]
    fn gradients_nonlinear_missingness() {
        check_gradients(&small_config(Linearity::Nonlinear), 12);
    }

    #[test]
    fn gradients_ablations() {
        let mut c = small_config(Linearity::Nonlinear);
        c.no_self_censoring = false;
        check_gradients(&c, 13);
        let mut c = small_config(Linearity::Linear);
        c.kappa2 = 0;
        c.mask_channel = true;
        check_gradients(&c, 14);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let mut rng = SeededRng::new(9);
        let p = ModelParams::new(&small_config(Linearity::Nonlinear), &mut rng).unwrap();
        p.save_checkpoint(&path, Some(rng.state())).unwrap();
        let back = ModelParams::load_checkpoint(&path).unwrap();
        assert_eq!(back.params, p);
        assert_eq!(back.rng_state, Some(rng.state()));
    }
}
