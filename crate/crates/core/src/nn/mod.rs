//! Dense feedforward networks with hand-written reverse-mode gradients.
//!
//! A [`Network`] is an ordered stack of dense layers `y = act(W x + b)`.
//! All parameters live in one flat `Vec<f64>`; each layer stores its
//! weights row-major with shape `(output_width, input_width)` followed by
//! its `output_width` biases. Gradients returned by [`Network::backward`]
//! use the same layout, so optimizers can treat them as plain vectors.

mod optim;
mod snapshot;

pub use optim::{LrDecay, Optimizer, OptimizerAlgorithm, OptimizerConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    /// Only valid on the final layer.
    Softmax,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
            Activation::Softmax => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            3 => Some(Activation::Softmax),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_width: usize,
    pub output_width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_width: usize, output_width: usize, activation: Activation) -> Self {
        Self {
            input_width,
            output_width,
            activation,
        }
    }

    pub fn parameter_count(&self) -> usize {
        (self.input_width + 1) * self.output_width
    }
}

/// Builds the layer stack `input -> hidden... -> output` with one activation
/// for every hidden layer.
pub fn mlp_layers(
    input: usize,
    hidden: &[usize],
    output: usize,
    hidden_activation: Activation,
    output_activation: Activation,
) -> Vec<LayerSpec> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut prev = input;
    for &h in hidden {
        layers.push(LayerSpec::new(prev, h, hidden_activation));
        prev = h;
    }
    layers.push(LayerSpec::new(prev, output, output_activation));
    layers
}

fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Config("network needs at least one layer".into()));
    }
    for (i, layer) in layers.iter().enumerate() {
        if layer.input_width == 0 || layer.output_width == 0 {
            return Err(Error::Config(format!("layer {i} has a zero width")));
        }
        if layer.activation == Activation::Softmax && i + 1 != layers.len() {
            return Err(Error::Config(format!(
                "softmax is only allowed on the final layer (found on layer {i})"
            )));
        }
        if i > 0 && layers[i - 1].output_width != layer.input_width {
            return Err(Error::Config(format!(
                "layer {i} expects width {} but the previous layer emits {}",
                layer.input_width,
                layers[i - 1].output_width
            )));
        }
    }
    Ok(())
}

/// Activations recorded by a forward pass; `values[0]` is the input and
/// `values[i + 1]` the post-activation output of layer `i`.
#[derive(Debug, Clone)]
pub struct Trace {
    values: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("trace always holds the input")
    }

    pub fn input(&self) -> &[f64] {
        &self.values[0]
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    parameters: Vec<f64>,
    cache: Option<Trace>,
}

impl Network {
    /// Creates a network with uniform fan-in scaled weights and zero biases.
    ///
    /// ReLU layers draw from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`; every other
    /// activation uses `sqrt(3/fan_in)`.
    pub fn new<R: Rng + ?Sized>(layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        validate_layers(&layers)?;
        let mut parameters = Vec::with_capacity(layers.iter().map(LayerSpec::parameter_count).sum());
        for layer in &layers {
            let fan_in = layer.input_width as f64;
            let limit = match layer.activation {
                Activation::Relu => (6.0 / fan_in).sqrt(),
                _ => (3.0 / fan_in).sqrt(),
            };
            for _ in 0..layer.input_width * layer.output_width {
                parameters.push(rng.gen_range(-limit..limit));
            }
            parameters.extend(std::iter::repeat_n(0.0, layer.output_width));
        }
        Self::from_parameters(layers, parameters)
    }

    pub fn from_parameters(layers: Vec<LayerSpec>, parameters: Vec<f64>) -> Result<Self> {
        validate_layers(&layers)?;
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for layer in &layers {
            offsets.push(total);
            total += layer.parameter_count();
        }
        if parameters.len() != total {
            return Err(Error::dimension("network parameters", total, parameters.len()));
        }
        Ok(Self {
            layers,
            offsets,
            parameters,
            cache: None,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters.len()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.parameters
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        self.cache = None;
        &mut self.parameters
    }

    /// Multiplies the final layer's weights and biases by `factor`; zero makes
    /// the network start as a constant-zero function of its input.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.layers.len() - 1;
        let start = self.offsets[last];
        self.parameters_mut()[start..].iter_mut().for_each(|p| *p *= factor);
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_width() {
            return Err(Error::dimension("network input", self.input_width(), input.len()));
        }
        Ok(())
    }

    fn layer_forward(&self, index: usize, input: &[f64]) -> Vec<f64> {
        let layer = &self.layers[index];
        let (n_in, n_out) = (layer.input_width, layer.output_width);
        let weights = &self.parameters[self.offsets[index]..self.offsets[index] + n_in * n_out];
        let biases = &self.parameters[self.offsets[index] + n_in * n_out..][..n_out];
        let mut out: Vec<f64> = weights
            .chunks_exact(n_in)
            .zip(biases)
            .map(|(row, &b)| row.iter().zip(input).fold(b, |acc, (w, x)| acc + w * x))
            .collect();
        match layer.activation {
            Activation::Identity => {}
            Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Softmax => softmax_in_place(&mut out),
        }
        out
    }

    /// Forward pass without recording activations.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = self.layer_forward(0, input);
        for i in 1..self.layers.len() {
            x = self.layer_forward(i, &x);
        }
        Ok(x)
    }

    /// Forward pass that keeps every intermediate activation.
    pub fn trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_vec());
        for i in 0..self.layers.len() {
            let next = self.layer_forward(i, &values[i]);
            values.push(next);
        }
        Ok(Trace { values })
    }

    /// Forward pass that caches the activations for a later [`Network::backward`].
    pub fn forward(&mut self, input: &[f64]) -> Result<Vec<f64>> {
        let trace = self.trace(input)?;
        let out = trace.output().to_vec();
        self.cache = Some(trace);
        Ok(out)
    }

    /// Parameter gradient of `output_gradient . output` for the cached forward pass.
    pub fn backward(&self, output_gradient: &[f64]) -> Result<Vec<f64>> {
        let trace = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("backward called before forward".into()))?;
        let mut grad = vec![0.0; self.parameter_count()];
        self.accumulate_gradient(trace, output_gradient, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Adds `scale * d(output_gradient . output)/d(parameters)` into `grad`.
    pub fn accumulate_gradient(
        &self,
        trace: &Trace,
        output_gradient: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        if output_gradient.len() != self.output_width() {
            return Err(Error::dimension(
                "output gradient",
                self.output_width(),
                output_gradient.len(),
            ));
        }
        if grad.len() != self.parameter_count() {
            return Err(Error::dimension("gradient buffer", self.parameter_count(), grad.len()));
        }
        if trace.values.len() != self.layers.len() + 1 {
            return Err(Error::Usage("trace does not belong to this network".into()));
        }
        let mut delta: Vec<f64> = output_gradient.iter().map(|g| g * scale).collect();
        for index in (0..self.layers.len()).rev() {
            let layer = &self.layers[index];
            let (n_in, n_out) = (layer.input_width, layer.output_width);
            let output = &trace.values[index + 1];
            match layer.activation {
                Activation::Identity => {}
                Activation::Relu => {
                    for (d, &y) in delta.iter_mut().zip(output) {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                Activation::Tanh => {
                    for (d, &y) in delta.iter_mut().zip(output) {
                        *d *= 1.0 - y * y;
                    }
                }
                Activation::Softmax => {
                    let dot: f64 = delta.iter().zip(output).map(|(d, y)| d * y).sum();
                    for (d, &y) in delta.iter_mut().zip(output) {
                        *d = y * (*d - dot);
                    }
                }
            }
            let input = &trace.values[index];
            let offset = self.offsets[index];
            let (gw, rest) = grad[offset..].split_at_mut(n_in * n_out);
            for (row, &d) in gw.chunks_exact_mut(n_in).zip(&delta) {
                if d != 0.0 {
                    for (g, &x) in row.iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
            }
            for (g, &d) in rest[..n_out].iter_mut().zip(&delta) {
                *g += d;
            }
            if index > 0 {
                let weights = &self.parameters[offset..offset + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for (row, &d) in weights.chunks_exact(n_in).zip(&delta) {
                    if d != 0.0 {
                        for (p, &w) in prev.iter_mut().zip(row) {
                            *p += d * w;
                        }
                    }
                }
                delta = prev;
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn parameter_count_matches_layer_sum() {
        let layers = mlp_layers(4, &[32, 16], 2, Activation::Relu, Activation::Softmax);
        let net = Network::new(layers, &mut rng()).unwrap();
        assert_eq!(net.parameter_count(), 5 * 32 + 33 * 16 + 17 * 2);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let params = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let net = Network::from_parameters(vec![LayerSpec::new(3, 3, Activation::Identity)], params)
            .unwrap();
        let x = [0.3, -1.7, 2.5];
        assert_eq!(net.predict(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn softmax_output_is_a_distribution() {
        let layers = mlp_layers(3, &[8], 5, Activation::Tanh, Activation::Softmax);
        let net = Network::new(layers, &mut rng()).unwrap();
        let y = net.predict(&[10.0, -3.0, 0.5]).unwrap();
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(y.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn softmax_must_be_last() {
        let layers = vec![
            LayerSpec::new(2, 2, Activation::Softmax),
            LayerSpec::new(2, 1, Activation::Identity),
        ];
        assert!(matches!(Network::new(layers, &mut rng()), Err(Error::Config(_))));
    }

    #[test]
    fn zero_width_is_rejected() {
        let layers = vec![LayerSpec::new(2, 0, Activation::Relu)];
        assert!(Network::new(layers, &mut rng()).is_err());
    }

    #[test]
    fn wrong_input_width_is_a_dimension_error() {
        let net = Network::new(mlp_layers(3, &[], 1, Activation::Relu, Activation::Identity), &mut rng())
            .unwrap();
        assert!(matches!(net.predict(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_before_forward_is_a_usage_error() {
        let net = Network::new(mlp_layers(2, &[3], 1, Activation::Relu, Activation::Identity), &mut rng())
            .unwrap();
        assert!(matches!(net.backward(&[1.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let mut net = Network::new(mlp_layers(3, &[6], 2, Activation::Tanh, Activation::Softmax), &mut rng())
            .unwrap();
        net.forward(&[0.1, 0.2, -0.4]).unwrap();
        let g = net.backward(&[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::new(mlp_layers(4, &[16], 3, Activation::Relu, Activation::Identity), &mut rng())
            .unwrap();
        let x = [0.5, -0.25, 1.0, 2.0];
        assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
    }
}
