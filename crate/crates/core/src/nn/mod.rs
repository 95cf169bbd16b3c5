//! A small CPU engine for feed-forward CNNs: batched forward passes with
//! cached activations, hand-written backward passes, losses, and Adam.
//!
//! Tensors are `f32`, row-major, with the batch as the leading dimension.
//! Image layers use `[N, C, H, W]`; dense layers use `[N, F]`.

mod io;
mod layers;
pub mod loss;
pub mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{decode_network, encode_network, load_network, save_network, WeightHeader};
pub use loss::{interval_iou, regression_loss, weighted_bce};
pub use optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape { layer: 0, msg: format!("shape {shape:?} needs {n} values, got {}", data.len()) });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Values for sample `i` of the batch.
    pub fn sample(&self, i: usize) -> &[f32] {
        let per = self.data.len() / self.batch().max(1);
        &self.data[i * per..(i + 1) * per]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        #[serde(default = "one")]
        stride: usize,
        /// Zero padding on every border.
        #[serde(default)]
        padding: usize,
    },
    Dense {
        units: usize,
    },
    Relu,
    Sigmoid,
    Dropout {
        p: f32,
    },
    Maxpool2d {
        pool: [usize; 2],
        /// Drop trailing rows/columns that do not fill a pooling window
        /// instead of rejecting the input.
        #[serde(default)]
        floor: bool,
    },
    Flatten,
    /// Two-unit head: `[0.5 * tanh(z0), sigmoid(z1)]`.
    IntervalHead,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { shape, value, grad }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Layer {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub params: Vec<Param>,
    cache: Option<layers::Cache>,
}

/// Output shape of `spec` on a per-sample input shape, or why it does not fit.
fn output_shape(spec: &LayerSpec, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
    match spec {
        LayerSpec::Conv2d { filters, kernel, stride, padding } => {
            let [h, w] = match input {
                [_, h, w] => [*h, *w],
                _ => return Err(format!("conv2d needs [C, H, W] input, got {input:?}")),
            };
            if *filters == 0 || kernel[0] == 0 || kernel[1] == 0 || *stride == 0 {
                return Err("conv2d filters, kernel and stride must be positive".into());
            }
            let (hp, wp) = (h + 2 * padding, w + 2 * padding);
            if hp < kernel[0] || wp < kernel[1] {
                return Err(format!("kernel {kernel:?} larger than padded input {hp}x{wp}"));
            }
            Ok(vec![*filters, (hp - kernel[0]) / stride + 1, (wp - kernel[1]) / stride + 1])
        }
        LayerSpec::Dense { units } => {
            if input.len() != 1 {
                return Err(format!("dense needs flat input, got {input:?}"));
            }
            if *units == 0 {
                return Err("dense units must be positive".into());
            }
            Ok(vec![*units])
        }
        LayerSpec::Maxpool2d { pool, floor } => {
            let [c, h, w] = match input {
                [c, h, w] => [*c, *h, *w],
                _ => return Err(format!("maxpool2d needs [C, H, W] input, got {input:?}")),
            };
            if pool[0] == 0 || pool[1] == 0 {
                return Err("pool size must be positive".into());
            }
            if h < pool[0] || w < pool[1] {
                return Err(format!("pool {pool:?} larger than input {h}x{w}"));
            }
            if !floor && (h % pool[0] != 0 || w % pool[1] != 0) {
                return Err(format!("input {h}x{w} not divisible by pool {pool:?}"));
            }
            Ok(vec![c, h / pool[0], w / pool[1]])
        }
        LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        LayerSpec::Dropout { p } => {
            if !(0.0..1.0).contains(p) {
                return Err(format!("dropout p={p} outside [0, 1)"));
            }
            Ok(input.to_vec())
        }
        LayerSpec::IntervalHead => {
            if input != [2] {
                return Err(format!("interval head needs 2 inputs, got {input:?}"));
            }
            Ok(vec![2])
        }
        LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, limit: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

/// Ordered stack of layers with their parameters.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    seed: u64,
}

impl Network {
    /// Builds the stack and initializes weights from `seed`: He-uniform for
    /// convolutions and for dense layers feeding a ReLU, Glorot-uniform for
    /// other dense layers. Biases start at zero.
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let out = output_shape(spec, &shape).map_err(|msg| Error::Shape { layer: i, msg })?;
            let params = match spec {
                LayerSpec::Conv2d { filters, kernel, .. } => {
                    let fan_in = shape[0] * kernel[0] * kernel[1];
                    let limit = (6.0 / fan_in as f32).sqrt();
                    vec![
                        Param::new(vec![*filters, shape[0], kernel[0], kernel[1]], uniform(&mut rng, filters * fan_in, limit)),
                        Param::new(vec![*filters], vec![0.0; *filters]),
                    ]
                }
                LayerSpec::Dense { units } => {
                    let fan_in = shape[0];
                    let feeds_relu = specs[i + 1..]
                        .iter()
                        .find(|s| !matches!(s, LayerSpec::Dropout { .. }))
                        .is_some_and(|s| matches!(s, LayerSpec::Relu));
                    let limit = if feeds_relu {
                        (6.0 / fan_in as f32).sqrt()
                    } else {
                        (6.0 / (fan_in + units) as f32).sqrt()
                    };
                    vec![
                        Param::new(vec![*units, fan_in], uniform(&mut rng, units * fan_in, limit)),
                        Param::new(vec![*units], vec![0.0; *units]),
                    ]
                }
                _ => Vec::new(),
            };
            layers.push(Layer { spec: spec.clone(), in_shape: shape.clone(), out_shape: out.clone(), params, cache: None });
            shape = out;
        }
        Ok(Self { input_shape: input_shape.to_vec(), layers, seed })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().map_or(&self.input_shape, |l| &l.out_shape)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape.len() != self.input_shape.len() + 1 || x.shape[1..] != self.input_shape[..] {
            return Err(Error::Shape {
                layer: 0,
                msg: format!("expected [N, {:?}], got {:?}", self.input_shape, x.shape),
            });
        }
        Ok(())
    }

    /// Forward pass. Train mode applies dropout using `rng` and caches what
    /// the backward pass needs; eval mode caches nothing.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if mode == Mode::Eval {
            return self.predict(x);
        }
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in self.layers.iter_mut() {
            let (out, cache) = layers::forward(layer, cur, Some(&mut *rng), true);
            layer.cache = cache;
            cur = out;
        }
        Ok(cur)
    }

    /// Eval-mode forward pass; takes `&self` so a loaded model can serve
    /// concurrent callers.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layers::forward(layer, cur, None, false).0;
        }
        Ok(cur)
    }

    fn backward_impl(&mut self, grad_out: &Tensor, input_grad: bool) -> Result<Option<Tensor>> {
        if self.layers.iter().any(|l| l.cache.is_none()) {
            return Err(Error::State("backward called without a cached train-mode forward pass"));
        }
        let expected: Vec<usize> = std::iter::once(grad_out.batch()).chain(self.output_shape().iter().copied()).collect();
        if grad_out.shape != expected {
            return Err(Error::Shape {
                layer: self.layers.len().saturating_sub(1),
                msg: format!("loss gradient shape {:?}, expected {expected:?}", grad_out.shape),
            });
        }
        let mut grad = grad_out.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let cache = layer.cache.take().expect("checked above");
            let need = input_grad || i > 0;
            match layers::backward(layer, &cache, grad, need) {
                Some(g) => grad = g,
                None => return Ok(None),
            }
        }
        Ok(Some(grad))
    }

    /// Accumulates parameter gradients from `grad_out` (the loss gradient
    /// w.r.t. the network output) and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        Ok(self.backward_impl(grad_out, true)?.expect("input gradient requested"))
    }

    /// Like [`Network::backward`] but skips the input gradient.
    pub fn backward_params(&mut self, grad_out: &Tensor) -> Result<()> {
        self.backward_impl(grad_out, false).map(|_| ())
    }

    /// Replaces all parameter values, in declaration order.
    pub(crate) fn set_param_values(&mut self, values: Vec<Vec<f32>>) -> Result<()> {
        let counts: Vec<usize> = self.params().map(|p| p.value.len()).collect();
        if values.len() != counts.len() || values.iter().zip(&counts).any(|(v, c)| v.len() != *c) {
            return Err(Error::CorruptModel("parameter sizes do not match the layer stack".into()));
        }
        for (p, v) in self.params_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    /// Copies parameter values from a network with the same architecture.
    pub fn copy_params_from(&mut self, other: &Network) {
        for (dst, src) in self.params_mut().zip(other.params()) {
            dst.value.copy_from_slice(&src.value);
        }
    }
}

#[cfg(test)]
mod tests;
