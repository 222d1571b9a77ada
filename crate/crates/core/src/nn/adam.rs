use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamTensors;

/// Optimizer state for Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub const DEFAULT_LEARNING_RATE: f64 = 0.001;

    /// Zeroed moments shaped like `params`, default hyperparameters.
    pub fn new<P: ParamTensors>(params: &P) -> Self {
        Self::with_learning_rate(params, Self::DEFAULT_LEARNING_RATE)
    }

    pub fn with_learning_rate<P: ParamTensors>(params: &P, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn moment_shapes(&self) -> Vec<usize> {
        self.first_moment.iter().map(Vec::len).collect()
    }
}

fn check_shapes<P: ParamTensors>(params: &P, grads: &P) -> Result<()> {
    let ps: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let gs: Vec<usize> = grads.tensors().iter().map(|t| t.len()).collect();
    if ps != gs {
        return Err(Error::Shape(format!(
            "parameter shapes {ps:?} do not match gradient shapes {gs:?}"
        )));
    }
    Ok(())
}

fn check_finite<P: ParamTensors>(grads: &P) -> Result<()> {
    for (t, name) in grads.tensors().iter().zip(grads.tensor_names()) {
        if let Some(i) = t.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient {} at {name}[{i}]", t[i])));
        }
    }
    Ok(())
}

/// One Adam update (descending along `grads`). On error nothing is modified.
pub fn adam_step<P: ParamTensors>(params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
    check_shapes(params, grads)?;
    if state.moment_shapes() != params.tensors().iter().map(|t| t.len()).collect::<Vec<_>>() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    check_finite(grads)?;

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let eps = state.epsilon;

    let grads = grads.tensors();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Plain gradient descent, `p -= lr * g`.
pub fn sgd_step<P: ParamTensors>(params: &mut P, grads: &P, learning_rate: f64) -> Result<()> {
    check_shapes(params, grads)?;
    check_finite(grads)?;
    let grads = grads.tensors();
    for (p, g) in params.tensors_mut().into_iter().zip(grads) {
        for (pi, gi) in p.iter_mut().zip(g) {
            *pi -= learning_rate * gi;
        }
    }
    Ok(())
}
