//! Fully-connected embedding network with an explicit backward pass.
//!
//! Hidden layers use a rectifier, the output layer is linear. Weights are
//! stored `out × in`, so a layer computes `x · Wᵀ + b` for a row batch `x`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EtmError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        DenseLayer {
            weights: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingNet {
    layer_dims: Vec<usize>,
    layers: Vec<DenseLayer>,
}

/// Per-layer inputs and hidden pre-activations recorded by
/// [`EmbeddingNet::forward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    inputs: Vec<Array2<f64>>,
    hidden_pre: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }

    /// Sign pattern of every hidden unit; used by gradient checks to skip
    /// perturbations that cross a rectifier kink.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.hidden_pre
            .iter()
            .flat_map(|z| z.iter().map(|&v| v > 0.0))
            .collect()
    }
}

/// Parameter gradients, laid out exactly like the network's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseLayer>,
}

impl Gradients {
    pub fn zeros_like(net: &EmbeddingNet) -> Self {
        Gradients {
            layers: net
                .layer_dims
                .windows(2)
                .map(|w| DenseLayer::zeros(w[0], w[1]))
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(DenseLayer::params)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.params_mut().for_each(|g| *g *= factor);
        }
    }

    /// Rescales so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }
}

impl EmbeddingNet {
    /// He-normal initialisation: weights `N(0, 2/fan_in)`, biases zero.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive std");
                DenseLayer {
                    weights: Array2::from_shape_simple_fn((fan_out, fan_in), || {
                        normal.sample(&mut rng)
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(EmbeddingNet {
            layer_dims: layer_dims.to_vec(),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(EtmError::Config("network needs at least one layer".into()));
        }
        let mut dims = vec![layers[0].weights.ncols()];
        for (i, l) in layers.iter().enumerate() {
            if l.weights.ncols() != *dims.last().unwrap() || l.bias.len() != l.weights.nrows() {
                return Err(EtmError::Shape(format!("layer {i} has inconsistent shapes")));
            }
            dims.push(l.weights.nrows());
        }
        validate_dims(&dims)?;
        let net = EmbeddingNet {
            layer_dims: dims,
            layers,
        };
        if !net.params().all(|p| p.is_finite()) {
            return Err(EtmError::Config("network parameters must be finite".into()));
        }
        Ok(net)
    }

    /// Rebuilds a network from `layer_dims` and parameters in the order of
    /// [`EmbeddingNet::params`].
    pub fn from_flat(layer_dims: &[usize], flat: &[f64]) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut net = EmbeddingNet {
            layer_dims: layer_dims.to_vec(),
            layers: layer_dims
                .windows(2)
                .map(|w| DenseLayer::zeros(w[0], w[1]))
                .collect(),
        };
        if flat.len() != net.num_params() {
            return Err(EtmError::Shape(format!(
                "expected {} parameters, got {}",
                net.num_params(),
                flat.len()
            )));
        }
        net.params_mut().zip(flat).for_each(|(p, v)| *p = *v);
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(DenseLayer::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(DenseLayer::params_mut)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.params().copied().collect()
    }

    fn check_input(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(EtmError::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Embeds a `B × F` batch, keeping what [`EmbeddingNet::backward`] needs.
    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardTrace)> {
        self.check_input(&batch)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut hidden_pre = Vec::with_capacity(last);
        let mut act = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = act.dot(&layer.weights.t()) + &layer.bias;
            inputs.push(act);
            if i == last {
                return Ok((z, ForwardTrace { inputs, hidden_pre }));
            }
            act = z.mapv(|v| v.max(0.0));
            hidden_pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Forward pass without a trace.
    pub fn embed(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&batch)?;
        let last = self.layers.len() - 1;
        let mut act = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            act = act.dot(&layer.weights.t()) + &layer.bias;
            if i != last {
                act.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(act)
    }

    /// Reverse-mode gradient of `⟨grad_embeddings, forward(x)⟩` with respect
    /// to every parameter. The rectifier's derivative at exactly 0 is 0.
    pub fn backward(&self, trace: &ForwardTrace, grad_embeddings: ArrayView2<f64>) -> Result<Gradients> {
        if trace.inputs.len() != self.layers.len() {
            return Err(EtmError::Shape("trace does not match network depth".into()));
        }
        let batch = trace.batch_size();
        if grad_embeddings.dim() != (batch, self.output_dim()) {
            return Err(EtmError::Shape(format!(
                "upstream gradient is {:?}, expected ({batch}, {})",
                grad_embeddings.dim(),
                self.output_dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_embeddings.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            if input.dim() != (batch, layer.weights.ncols()) {
                return Err(EtmError::Shape(format!("trace layer {i} has wrong shape")));
            }
            grads.push(DenseLayer {
                weights: upstream.t().dot(input),
                bias: upstream.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut down = upstream.dot(&layer.weights);
                Zip::from(&mut down)
                    .and(&trace.hidden_pre[i - 1])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
                upstream = down;
            }
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(EtmError::Config(format!(
            "layer_dims must have at least two positive entries, got {dims:?}"
        )));
    }
    Ok(())
}
