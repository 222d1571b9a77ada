//! Reparameterized Gaussian draws and the positivity transform for scales.

use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus};
use crate::rng::SeededRng;

/// Lower bound applied after softplus when a network emits a scale.
pub const SCALE_FLOOR: f64 = 1e-6;

/// `max(softplus(raw), floor)`: strictly positive for every real input.
#[inline]
pub fn positive_scale(raw: f64, floor: f64) -> f64 {
    softplus(raw).max(floor)
}

/// Derivative of [`positive_scale`] with respect to `raw` (zero on the floor).
#[inline]
pub fn positive_scale_grad(raw: f64, floor: f64) -> f64 {
    if softplus(raw) > floor {
        sigmoid(raw)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSample {
    pub value: Vec<f64>,
    /// Standard-normal noise; `value = mean + scale * noise`.
    pub noise: Vec<f64>,
}

/// `mean + scale ⊙ ε` with `ε ~ N(0, I)`. The noise is returned so callers
/// can differentiate through mean and scale.
pub fn sample_gaussian_reparam(mean: &[f64], scale: &[f64], rng: &mut SeededRng) -> Result<GaussianSample> {
    if mean.len() != scale.len() {
        return Err(Error::Shape(format!(
            "mean has length {}, scale {}",
            mean.len(),
            scale.len()
        )));
    }
    if let Some(s) = scale.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Domain(format!("scale entries must be positive, got {s}")));
    }
    let noise: Vec<f64> = (0..mean.len()).map(|_| rng.normal()).collect();
    let value = mean
        .iter()
        .zip(scale)
        .zip(&noise)
        .map(|((m, s), e)| m + s * e)
        .collect();
    Ok(GaussianSample { value, noise })
}
