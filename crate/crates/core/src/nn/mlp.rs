//! Dense tanh networks with batched forward and reverse-mode backward passes.
//!
//! A network with `layer_dims = [d0, d1, ..., dL]` has `L` affine layers.
//! Every layer except the last is followed by `tanh`; the output layer is
//! the identity. Weights are stored input-major (`d_in x d_out`) so a batch
//! of row vectors `X` (one sample per row) maps to `X W + b`.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::tanh;
use crate::nn::ParamTensors;
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    layers: Vec<Dense>,
}

/// Activations saved by [`Mlp::forward_cached`] for the backward pass.
/// `activations[0]` is the input and `activations[L]` the output.
#[derive(Debug, Clone)]
pub struct MlpCache {
    activations: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.activations[0]
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(layer_dims: &[usize], rng: &mut SeededRng) -> Result<Self> {
        let mut net = Self::zeros(layer_dims)?;
        for layer in &mut net.layers {
            let (fan_in, fan_out) = layer.weight.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.uniform_range(-limit, limit));
        }
        Ok(net)
    }

    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Shape(format!(
                "a network needs at least input and output dims, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::Shape(format!("layer dims must be positive, got {layer_dims:?}")));
        }
        let layers = layer_dims
            .windows(2)
            .map(|w| Dense {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
        })
    }

    /// Same shapes, all parameters zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.layer_dims).expect("dims already validated")
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Single-vector forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).unwrap();
        Ok(self.forward_batch(x).into_raw_vec_and_offset().0)
    }

    /// Batched forward pass without keeping intermediate activations.
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(input.ncols(), self.input_dim(), "batch width mismatch");
        let last = self.layers.len() - 1;
        let mut h = self.affine(0, input);
        if last > 0 {
            h.mapv_inplace(tanh);
        }
        for (i, _) in self.layers.iter().enumerate().skip(1) {
            h = self.affine(i, h.view());
            if i < last {
                h.mapv_inplace(tanh);
            }
        }
        h
    }

    /// Batched forward pass that keeps every activation for [`Mlp::backward`].
    pub fn forward_cached(&self, input: Array2<f64>) -> MlpCache {
        assert_eq!(input.ncols(), self.input_dim(), "batch width mismatch");
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input);
        for i in 0..self.layers.len() {
            let mut h = self.affine(i, activations[i].view());
            if i < last {
                h.mapv_inplace(tanh);
            }
            activations.push(h);
        }
        MlpCache { activations }
    }

    fn affine(&self, i: usize, x: ArrayView2<f64>) -> Array2<f64> {
        let layer = &self.layers[i];
        let (n, d_in) = x.dim();
        let d_out = layer.bias.len();
        let x = x.as_standard_layout();
        let x = x.as_slice().expect("standard layout");
        let w = layer.weight.as_slice().expect("standard layout");
        let b = layer.bias.as_slice().expect("standard layout");
        let mut out = vec![0.0; n * d_out];
        // Row-by-row axpy: the networks are narrow, so blocked GEMM
        // spends more time packing than multiplying.
        for (xi, oi) in x.chunks_exact(d_in).zip(out.chunks_exact_mut(d_out)) {
            oi.copy_from_slice(b);
            for (&a, wk) in xi.iter().zip(w.chunks_exact(d_out)) {
                for (o, &wv) in oi.iter_mut().zip(wk) {
                    *o += a * wv;
                }
            }
        }
        Array2::from_shape_vec((n, d_out), out).expect("shape")
    }

    /// Reverse pass. `output_grad` is dLoss/dOutput for every row of the
    /// cached batch. Parameter gradients are *added* into `grads` (summed
    /// over the batch); the gradient with respect to the input is returned.
    pub fn backward(&self, cache: &MlpCache, output_grad: Array2<f64>, grads: &mut Mlp) -> Array2<f64> {
        debug_assert_eq!(grads.layer_dims, self.layer_dims);
        let mut delta = output_grad.as_standard_layout().into_owned();
        for i in (0..self.layers.len()).rev() {
            let input = cache.activations[i].as_standard_layout();
            let x = input.as_slice().expect("standard layout");
            let (n, d_in) = input.dim();
            let d_out = self.layer_dims[i + 1];
            let d = delta.as_slice().expect("standard layout");
            let g = &mut grads.layers[i];
            let gw = g.weight.as_slice_mut().expect("standard layout");
            let gb = g.bias.as_slice_mut().expect("standard layout");
            let w = self.layers[i].weight.as_slice().expect("standard layout");
            let mut d_input = vec![0.0; n * d_in];
            for ((xi, di), dxi) in x
                .chunks_exact(d_in)
                .zip(d.chunks_exact(d_out))
                .zip(d_input.chunks_exact_mut(d_in))
            {
                for (b, &dv) in gb.iter_mut().zip(di) {
                    *b += dv;
                }
                for ((&a, gk), (dx, wk)) in xi
                    .iter()
                    .zip(gw.chunks_exact_mut(d_out))
                    .zip(dxi.iter_mut().zip(w.chunks_exact(d_out)))
                {
                    let mut acc = 0.0;
                    for ((gv, &dv), &wv) in gk.iter_mut().zip(di).zip(wk) {
                        *gv += a * dv;
                        acc += dv * wv;
                    }
                    // input of layer i is the tanh output of layer i-1
                    *dx = if i > 0 { acc * (1.0 - a * a) } else { acc };
                }
            }
            delta = Array2::from_shape_vec((n, d_in), d_input).expect("shape");
        }
        delta
    }

    /// Single-vector backward pass returning fresh parameter gradients and
    /// the input gradient.
    pub fn backward_single(&self, input: &[f64], output_grad: &[f64]) -> Result<(Mlp, Vec<f64>)> {
        if input.len() != self.input_dim() || output_grad.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "backward expects input {} and output grad {}, got {} and {}",
                self.input_dim(),
                self.output_dim(),
                input.len(),
                output_grad.len()
            )));
        }
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).unwrap();
        let cache = self.forward_cached(x);
        let dy = Array2::from_shape_vec((1, output_grad.len()), output_grad.to_vec()).unwrap();
        let mut grads = self.zeros_like();
        let dx = self.backward(&cache, dy, &mut grads);
        Ok((grads, dx.into_raw_vec_and_offset().0))
    }

    /// `self += scale * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &Mlp, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
    }
}

impl ParamTensors for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }
}
