//! Minimal dense neural-network substrate.

pub mod adam;
pub mod gaussian;
pub mod gradcheck;
pub mod mlp;

pub use adam::{adam_step, sgd_step, AdamState};
pub use gaussian::{positive_scale, positive_scale_grad, sample_gaussian_reparam, GaussianSample};
pub use mlp::{Dense, Mlp, MlpCache};

/// Uniform access to the parameter tensors of a model, in a fixed order.
///
/// Gradients are stored in a value of the same type, so optimizers can walk
/// parameters and gradients in lockstep.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;
    /// Dotted path of each tensor, parallel to [`ParamTensors::tensors`].
    fn tensor_names(&self) -> Vec<String>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Read the `idx`-th scalar in flattened order.
    fn get_flat(&self, mut idx: usize) -> f64 {
        for t in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }

    fn set_flat(&mut self, mut idx: usize, value: f64) {
        for t in self.tensors_mut() {
            if idx < t.len() {
                t[idx] = value;
                return;
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }

    /// Name of the tensor holding the `idx`-th flattened scalar.
    fn flat_name(&self, mut idx: usize) -> String {
        let names = self.tensor_names();
        for (t, name) in self.tensors().iter().zip(names) {
            if idx < t.len() {
                return format!("{name}[{idx}]");
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }
}
