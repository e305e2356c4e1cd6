//! Minimal fully connected networks: initialization, forward and backward
//! passes, SGD with momentum, learning-rate schedules, checkpoints and the
//! training loop.

pub mod checkpoint;
pub mod optim;
pub mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Result};

pub use optim::{lr_at, sgd_step, LrSchedule, Velocity};
pub use train::{train, EpochRecord, MetricsLog, StepRecord, TeacherSource, TrainConfig, TrainLoss};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 1,
            Activation::Identity => 0,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

/// Input width, hidden widths (ReLU), and class count (identity output).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self { input_dim, hidden, classes }
    }

    /// e.g. `mlp-32-256-256-10`
    pub fn tag(&self) -> String {
        let mut parts = vec![self.input_dim.to_string()];
        parts.extend(self.hidden.iter().map(usize::to_string));
        parts.push(self.classes.to_string());
        format!("mlp-{}", parts.join("-"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
    pub seed: u64,
    pub arch_tag: String,
}

impl NetworkParams {
    /// Checks that layer shapes chain and the last layer is a linear map.
    pub fn validate(&self) -> Result<()> {
        let last = self.layers.last().ok_or_else(|| invalid("network has no layers"))?;
        if last.activation != Activation::Identity {
            return Err(invalid("output layer must use the identity activation"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.len() != l.weights.ncols() {
                return Err(shape(format!("layer {i}: bias {} for {} outputs", l.bias.len(), l.weights.ncols())));
            }
            if i > 0 && self.layers[i - 1].weights.ncols() != l.weights.nrows() {
                return Err(shape(format!("layer {i} does not chain with layer {}", i - 1)));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.ncols())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

/// Uniform `[-1/√fan_in, 1/√fan_in]` for weights and biases, from `seed`.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<NetworkParams> {
    if arch.input_dim == 0 || arch.classes < 2 || arch.hidden.contains(&0) {
        return Err(invalid(format!("degenerate architecture {}", arch.tag())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![arch.input_dim];
    dims.extend(&arch.hidden);
    dims.push(arch.classes);
    let layers = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..=bound));
            let bias = Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..=bound));
            let activation = if i + 2 == dims.len() { Activation::Identity } else { Activation::Relu };
            Layer { weights, bias, activation }
        })
        .collect();
    Ok(NetworkParams { layers, seed, arch_tag: arch.tag() })
}

/// Layer inputs and pre-activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

pub fn forward(params: &NetworkParams, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
    if x.ncols() != params.input_dim() {
        return Err(shape(format!("{} input features, network expects {}", x.ncols(), params.input_dim())));
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut a = x.to_owned();
    for layer in &params.layers {
        let z = a.dot(&layer.weights) + &layer.bias;
        let out = match layer.activation {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        };
        inputs.push(a);
        pre.push(z);
        a = out;
    }
    Ok((a, ForwardCache { inputs, pre }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }
}

/// Parameter gradients given `dloss/dlogits` for the cached batch.
pub fn backward(params: &NetworkParams, cache: &ForwardCache, dlogits: ArrayView2<'_, f64>) -> Result<Gradients> {
    let n = cache.inputs.first().map_or(0, |a| a.nrows());
    if cache.inputs.len() != params.layers.len() || dlogits.dim() != (n, params.output_dim()) {
        return Err(shape(format!(
            "upstream gradient {:?} does not match cached batch of {n} with {} outputs",
            dlogits.dim(),
            params.output_dim()
        )));
    }
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut da = dlogits.to_owned();
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let mut dz = da;
        if layer.activation == Activation::Relu {
            dz.zip_mut_with(&cache.pre[l], |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        let dw = cache.inputs[l].t().dot(&dz);
        let db = dz.sum_axis(Axis(0));
        da = dz.dot(&layer.weights.t());
        grads.push(LayerGrad { weights: dw, bias: db });
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}
