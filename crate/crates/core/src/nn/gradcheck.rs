//! Central finite differences for checking hand-written gradients.

use crate::nn::ParamTensors;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-4;
/// Denominator floor used by [`relative_error`].
pub const ABS_FLOOR: f64 = 1e-6;

/// `(f(p + h e_idx) - f(p - h e_idx)) / 2h`, restoring the parameter after.
pub fn central_difference<P: ParamTensors>(params: &mut P, idx: usize, step: f64, mut f: impl FnMut(&P) -> f64) -> f64 {
    let orig = params.get_flat(idx);
    params.set_flat(idx, orig + step);
    let up = f(params);
    params.set_flat(idx, orig - step);
    let down = f(params);
    params.set_flat(idx, orig);
    (up - down) / (2.0 * step)
}

/// `|a - b| / max(|a|, |b|, ABS_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}
