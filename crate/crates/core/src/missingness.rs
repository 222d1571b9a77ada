//! Synthetic MNAR masks for complete tables.
//!
//! Four families are provided:
//!
//! * **latent**: `R_j ~ Bernoulli(σ(h_j(X_{-j}, Z̃) + c))` with a per-row
//!   latent `Z̃ ~ N(0, I)` shared by all indicators of the row;
//! * **threshold**: `R_j = 1{U_j > σ(g_j(X_{-j}) + c)}`, `U_j ~ U(0, 1)`;
//! * **blockwise**: the threshold construction with one indicator per
//!   group of columns, driven by the columns outside the group;
//! * **self-censoring**: the first half of the columns is always observed,
//!   the rest go missing when they exceed their column mean.
//!
//! `h` and `g` are linear or one-hidden-layer tanh maps with uniform(-1, 1)
//! coefficients. Unless `self_censoring_allowed` is set, the inputs an
//! indicator must not see (its own column, or its whole group) are zeroed
//! before evaluation, so its logit cannot depend on them. The constant `c`
//! is the logit offset used to hit a target missing rate. Logits are
//! clamped to `[-30, 30]`.
//!
//! Note the opposite orientation of the two constructions: raising the
//! offset makes the latent mechanism observe *more* and the threshold
//! mechanism observe *less*.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::DataTable;
use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::rng::SeededRng;

pub const LOGIT_CLAMP: f64 = 30.0;
const CALIBRATION_STEPS: usize = 60;
const OFFSET_BRACKET: f64 = 2.0 * LOGIT_CLAMP;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Latent,
    Threshold,
    Blockwise,
    SelfCensoring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linearity {
    #[default]
    Linear,
    Nonlinear,
}

fn default_latent_dim() -> usize {
    1
}

fn default_mechanism_width() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingnessSpec {
    pub mechanism: Mechanism,
    #[serde(default)]
    pub linearity: Linearity,
    /// Whether an indicator may depend on the variables it governs.
    #[serde(default)]
    pub self_censoring_allowed: bool,
    /// Dimension of the mechanism latent (latent mechanism only).
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Contiguous groups of this size (blockwise only).
    #[serde(default)]
    pub group_size: Option<usize>,
    /// Explicit column groups (blockwise only); overrides `group_size`.
    #[serde(default)]
    pub groups: Option<Vec<Vec<usize>>>,
    /// Hidden width of nonlinear mechanism maps.
    #[serde(default = "default_mechanism_width")]
    pub hidden_width: usize,
    /// Missing-rate interval `[lo, hi]` for offset calibration.
    #[serde(default)]
    pub target_missing_rate: Option<[f64; 2]>,
    /// Fixed logit offset; when absent and a target is given, calibrated.
    #[serde(default)]
    pub offset: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl MissingnessSpec {
    pub fn new(mechanism: Mechanism) -> Self {
        Self {
            mechanism,
            linearity: Linearity::Linear,
            self_censoring_allowed: false,
            latent_dim: 1,
            group_size: None,
            groups: None,
            hidden_width: 8,
            target_missing_rate: None,
            offset: None,
            seed: 0,
        }
    }

    /// Collects every problem with the spec for a table with `p` columns.
    pub fn problems(&self, p: usize) -> Vec<String> {
        let mut out = Vec::new();
        if let Some([lo, hi]) = self.target_missing_rate {
            if !(lo > 0.0 && hi < 1.0 && lo < hi) {
                out.push(format!("target missing rate [{lo}, {hi}] must satisfy 0 < lo < hi < 1"));
            }
        }
        if let Some(c) = self.offset {
            if !c.is_finite() {
                out.push("offset must be finite".into());
            }
        }
        if self.linearity == Linearity::Nonlinear && self.hidden_width == 0 {
            out.push("hidden_width must be positive".into());
        }
        if self.mechanism == Mechanism::Latent && self.latent_dim == 0 {
            out.push("latent mechanism needs latent_dim >= 1".into());
        }
        if self.mechanism == Mechanism::Blockwise {
            match self.resolve_groups(p) {
                Ok(_) => {}
                Err(e) => out.push(e.to_string()),
            }
        }
        out
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let problems = self.problems(p);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Spec(problems.join("; ")))
        }
    }

    /// Column groups sharing one indicator: singletons except for the
    /// blockwise mechanism.
    pub fn resolve_groups(&self, p: usize) -> Result<Vec<Vec<usize>>> {
        if self.mechanism != Mechanism::Blockwise {
            return Ok((0..p).map(|j| vec![j]).collect());
        }
        let groups = match (&self.groups, self.group_size) {
            (Some(g), _) => g.clone(),
            (None, Some(gs)) if gs > 0 => (0..p).step_by(gs).map(|s| (s..(s + gs).min(p)).collect()).collect(),
            (None, Some(_)) => return Err(Error::Spec("group_size must be positive".into())),
            (None, None) => return Err(Error::Spec("blockwise mechanism needs group_size or groups".into())),
        };
        let mut seen = vec![false; p];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::Spec("empty column group".into()));
            }
            for &c in g {
                if c >= p {
                    return Err(Error::Spec(format!(
                        "group refers to unknown column {c} (table has {p})"
                    )));
                }
                if seen[c] {
                    return Err(Error::Spec(format!("column {c} appears in more than one group")));
                }
                seen[c] = true;
            }
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::Spec(format!("column {c} is not assigned to any group")));
        }
        Ok(groups)
    }
}

/// Logit offset added to every mechanism logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitOffset(pub f64);

/// One indicator's map: `out_w · a + out_b` where `a` is either the masked
/// input (linear) or `tanh(W · input + b)` (nonlinear).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndicatorMap {
    hidden: Option<(Array2<f64>, Vec<f64>)>,
    out_w: Vec<f64>,
    out_b: f64,
    /// Inputs zeroed before evaluation (its own columns, unless allowed).
    blocked: Vec<usize>,
}

impl IndicatorMap {
    fn eval(&self, input: &mut [f64], scratch: &mut Vec<f64>) -> f64 {
        for &b in &self.blocked {
            input[b] = 0.0;
        }
        match &self.hidden {
            None => self.out_w.iter().zip(input.iter()).map(|(w, x)| w * x).sum::<f64>() + self.out_b,
            Some((w, b)) => {
                scratch.clear();
                for (row, bias) in w.rows().into_iter().zip(b) {
                    let a: f64 = row.iter().zip(input.iter()).map(|(w, x)| w * x).sum::<f64>() + bias;
                    scratch.push(a.tanh());
                }
                self.out_w.iter().zip(scratch.iter()).map(|(w, h)| w * h).sum::<f64>() + self.out_b
            }
        }
    }
}

/// Randomly drawn coefficients of a mechanism for a given table width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismMaps {
    groups: Vec<Vec<usize>>,
    maps: Vec<IndicatorMap>,
    p: usize,
    latent_dim: usize,
}

impl MechanismMaps {
    /// Coefficients come from substream 0 of the spec seed.
    pub fn draw(spec: &MissingnessSpec, p: usize) -> Result<Self> {
        spec.validate(p)?;
        let groups = spec.resolve_groups(p)?;
        let latent_dim = if spec.mechanism == Mechanism::Latent {
            spec.latent_dim
        } else {
            0
        };
        let width_in = p + latent_dim;
        let mut rng = SeededRng::new(spec.seed).substream(0);
        let mut u = || rng.uniform_range(-1.0, 1.0);
        let maps = groups
            .iter()
            .map(|g| {
                let blocked = if spec.self_censoring_allowed {
                    Vec::new()
                } else {
                    g.clone()
                };
                let (hidden, out_w) = match spec.linearity {
                    Linearity::Linear => (None, (0..width_in).map(|_| u()).collect()),
                    Linearity::Nonlinear => {
                        let w = Array2::from_shape_fn((spec.hidden_width, width_in), |_| u());
                        let b = (0..spec.hidden_width).map(|_| u()).collect();
                        (Some((w, b)), (0..spec.hidden_width).map(|_| u()).collect())
                    }
                };
                IndicatorMap {
                    hidden,
                    out_w,
                    out_b: u(),
                    blocked,
                }
            })
            .collect();
        Ok(Self {
            groups,
            maps,
            p,
            latent_dim,
        })
    }

    /// Maps whose every coefficient is zero (logit = offset everywhere).
    pub fn constant(spec: &MissingnessSpec, p: usize) -> Result<Self> {
        let mut m = Self::draw(spec, p)?;
        for map in &mut m.maps {
            if let Some((w, b)) = &mut map.hidden {
                w.fill(0.0);
                b.iter_mut().for_each(|v| *v = 0.0);
            }
            map.out_w.iter_mut().for_each(|v| *v = 0.0);
            map.out_b = 0.0;
        }
        Ok(m)
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Clamped logits of every indicator for one row (without offset).
    pub fn logits(&self, x: &[f64], latent: &[f64]) -> Vec<f64> {
        let mut input = vec![0.0; self.p + self.latent_dim];
        let mut scratch = Vec::new();
        self.maps
            .iter()
            .map(|m| {
                input[..self.p].copy_from_slice(x);
                input[self.p..].copy_from_slice(latent);
                m.eval(&mut input, &mut scratch)
            })
            .collect()
    }
}

fn clamp_logit(l: f64) -> f64 {
    l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Mask for a given offset. Per row: the mechanism latent (latent family),
/// then one uniform per indicator, all from substream 1 of the seed.
fn draw_mask(table: &DataTable, spec: &MissingnessSpec, maps: &MechanismMaps, offset: f64) -> Array2<bool> {
    let (n, p) = (table.n_rows(), table.n_cols());
    let mut rng = SeededRng::new(spec.seed).substream(1);
    let mut mask = Array2::from_elem((n, p), true);
    let mut latent = vec![0.0; maps.latent_dim];
    let mut input = vec![0.0; p + maps.latent_dim];
    let mut scratch = Vec::new();
    for i in 0..n {
        rng.fill_normal(&mut latent);
        let row = table.values.row(i);
        for (g, map) in maps.groups.iter().zip(&maps.maps) {
            for (dst, &v) in input.iter_mut().zip(row.iter()) {
                *dst = v;
            }
            input[p..].copy_from_slice(&latent);
            let prob = sigmoid(clamp_logit(map.eval(&mut input, &mut scratch) + offset));
            let u = rng.uniform();
            let observed = match spec.mechanism {
                Mechanism::Latent => u < prob,
                _ => u > prob,
            };
            for &c in g {
                mask[[i, c]] = observed;
            }
        }
    }
    mask
}

fn require_complete(table: &DataTable) -> Result<()> {
    if !table.is_complete() {
        return Err(Error::Domain(
            "missingness can only be simulated on a fully observed table".into(),
        ));
    }
    Ok(())
}

fn apply_with(table: &DataTable, spec: &MissingnessSpec, expected: &[Mechanism]) -> Result<DataTable> {
    require_complete(table)?;
    if !expected.contains(&spec.mechanism) {
        return Err(Error::Spec(format!(
            "expected mechanism {expected:?}, got {:?}",
            spec.mechanism
        )));
    }
    let maps = MechanismMaps::draw(spec, table.n_cols())?;
    let offset = spec.offset.unwrap_or(0.0);
    table.with_mask(draw_mask(table, spec, &maps, offset))
}

/// Latent-variable mechanism with the spec's offset (0 if unset).
pub fn apply_latent_mechanism(table: &DataTable, spec: &MissingnessSpec) -> Result<DataTable> {
    apply_with(table, spec, &[Mechanism::Latent])
}

/// Uniform-threshold mechanism with the spec's offset (0 if unset).
pub fn apply_threshold_mechanism(table: &DataTable, spec: &MissingnessSpec) -> Result<DataTable> {
    apply_with(table, spec, &[Mechanism::Threshold])
}

/// Blockwise threshold mechanism with the spec's offset (0 if unset).
pub fn apply_blockwise(table: &DataTable, spec: &MissingnessSpec) -> Result<DataTable> {
    apply_with(table, spec, &[Mechanism::Blockwise])
}

/// Keeps the first `⌈p/2⌉` columns; each later column is missing exactly
/// where it exceeds its column mean.
pub fn apply_self_censoring(table: &DataTable) -> Result<DataTable> {
    require_complete(table)?;
    let (n, p) = (table.n_rows(), table.n_cols());
    let mut mask = Array2::from_elem((n, p), true);
    for j in p.div_ceil(2)..p {
        let col = table.values.column(j);
        let mean = col.sum() / n as f64;
        for i in 0..n {
            mask[[i, j]] = !(col[i] > mean);
        }
    }
    table.with_mask(mask)
}

/// Finds an offset putting the missing rate (over rows that keep at least
/// one observed entry) inside the spec's target interval. Uses the same
/// random draws as the subsequent application, so the applied mask attains
/// exactly the calibrated rate.
pub fn calibrate_offset(table: &DataTable, spec: &MissingnessSpec) -> Result<LogitOffset> {
    require_complete(table)?;
    let [lo, hi] = spec
        .target_missing_rate
        .ok_or_else(|| Error::Spec("calibration needs target_missing_rate".into()))?;
    if spec.mechanism == Mechanism::SelfCensoring {
        return Err(Error::Spec("self-censoring has no offset to calibrate".into()));
    }
    let maps = MechanismMaps::draw(spec, table.n_cols())?;
    let rate = |c: f64| -> Result<f64> {
        Ok(table
            .with_mask(draw_mask(table, spec, &maps, c))?
            .missing_rate_excluding_empty_rows())
    };
    let target = 0.5 * (lo + hi);
    let mut a = -OFFSET_BRACKET;
    let mut b = OFFSET_BRACKET;
    let fa = rate(a)? - target;
    let fb = rate(b)? - target;
    if fa.signum() == fb.signum() {
        return Err(Error::Calibration(format!(
            "target [{lo}, {hi}] is not bracketed: rates {:.4} and {:.4} at offsets {a} and {b}",
            fa + target,
            fb + target
        )));
    }
    for _ in 0..CALIBRATION_STEPS {
        let mid = 0.5 * (a + b);
        let r = rate(mid)?;
        if (lo..=hi).contains(&r) {
            return Ok(LogitOffset(mid));
        }
        if (r - target).signum() == fa.signum() {
            a = mid;
        } else {
            b = mid;
        }
    }
    Err(Error::Calibration(format!(
        "no offset reached [{lo}, {hi}] after {CALIBRATION_STEPS} bisection steps"
    )))
}

/// A mask together with how it was produced.
#[derive(Debug, Clone)]
pub struct MaskOutcome {
    pub table: DataTable,
    pub offset: Option<f64>,
    pub missing_rate: f64,
}

/// Applies any mechanism, calibrating the offset first when the spec has a
/// target rate and no explicit offset.
pub fn simulate_missingness(table: &DataTable, spec: &MissingnessSpec) -> Result<MaskOutcome> {
    let (masked, offset) = match spec.mechanism {
        Mechanism::SelfCensoring => (apply_self_censoring(table)?, None),
        _ => {
            let mut resolved = spec.clone();
            if resolved.offset.is_none() && resolved.target_missing_rate.is_some() {
                resolved.offset = Some(calibrate_offset(table, spec)?.0);
            }
            let masked = apply_with(table, &resolved, &[spec.mechanism])?;
            (masked, Some(resolved.offset.unwrap_or(0.0)))
        }
    };
    let missing_rate = masked.missing_rate_excluding_empty_rows();
    Ok(MaskOutcome {
        table: masked,
        offset,
        missing_rate,
    })
}
