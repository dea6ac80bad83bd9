use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, expect_shape, Checkpoint, EngineError, Parameterized, Record, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
        }
    }

    /// Multiplies `grad` in place by the activation derivative, expressed
    /// through the activation's output `y`.
    fn backprop(self, y: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad.zip_mut_with(y, |g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Sigmoid => grad.zip_mut_with(y, |g, &y| *g *= y * (1.0 - y)),
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Layer widths (input width first) with one activation per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
}

impl DenseNetSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>, seed: u64) -> Self {
        Self { widths, activations, seed }
    }

    /// ReLU on every hidden layer, `last` on the output layer.
    pub fn mlp(widths: &[usize], last: Activation, seed: u64) -> Self {
        let n = widths.len().saturating_sub(1);
        let mut activations = vec![Activation::Relu; n];
        if let Some(a) = activations.last_mut() {
            *a = last;
        }
        Self::new(widths.to_vec(), activations, seed)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.widths.len() < 2 {
            return Err(EngineError::InvalidSpec("need at least one layer".into()));
        }
        if self.activations.len() != self.widths.len() - 1 {
            return Err(EngineError::InvalidSpec(format!(
                "{} activations for {} layers",
                self.activations.len(),
                self.widths.len() - 1
            )));
        }
        if self.widths.contains(&0) {
            return Err(EngineError::InvalidSpec("zero width".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `fan_in × fan_out`
    pub weight: Tensor,
    /// `1 × fan_out`
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight.value);
        z += &self.bias.value;
        self.activation.apply(&mut z);
        z
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    output: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseNet {
    spec: DenseNetSpec,
    pub layers: Vec<DenseLayer>,
    cache: Option<Vec<LayerCache>>,
}

impl DenseNet {
    /// Glorot-uniform weights drawn from the spec seed, zero biases.
    pub fn new(spec: DenseNetSpec) -> Result<Self, EngineError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .widths
            .windows(2)
            .zip(&spec.activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-a..a));
                DenseLayer { weight: Tensor::new(weight), bias: Tensor::new(Array2::zeros((1, fan_out))), activation }
            })
            .collect();
        Ok(Self { spec, layers, cache: None })
    }

    pub fn spec(&self) -> &DenseNetSpec {
        &self.spec
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width()
    }

    pub fn output_width(&self) -> usize {
        self.spec.output_width()
    }

    /// Forward pass that records intermediates for [`DenseNet::backward`].
    pub fn forward(&mut self, input: &Array2<f64>) -> Result<Array2<f64>, EngineError> {
        self.check_input(input)?;
        let mut cache = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let y = layer.forward(&x);
            cache.push(LayerCache { input: x, output: y.clone() });
            x = y;
        }
        check_finite(&x, "forward output")?;
        self.cache = Some(cache);
        Ok(x)
    }

    /// Output of the last hidden layer from the most recent recorded forward.
    pub fn penultimate(&self) -> Option<&Array2<f64>> {
        self.cache.as_ref().map(|c| &c[c.len() - 1].input)
    }

    /// Forward pass without recording.
    pub fn predict(&self, input: &Array2<f64>) -> Result<Array2<f64>, EngineError> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x);
        }
        check_finite(&x, "forward output")?;
        Ok(x)
    }

    /// Accumulates parameter gradients for `upstream = ∂L/∂output` and
    /// returns `∂L/∂input`.
    pub fn backward(&mut self, upstream: &Array2<f64>) -> Result<Array2<f64>, EngineError> {
        let cache = self.cache.as_ref().ok_or(EngineError::NoForwardRecorded)?;
        let last = &cache[cache.len() - 1].output;
        expect_shape(upstream, last.shape())?;
        let mut grad = upstream.clone();
        for (layer, c) in self.layers.iter_mut().zip(cache.iter()).rev() {
            layer.activation.backprop(&c.output, &mut grad);
            layer.weight.grad += &c.input.t().dot(&grad);
            layer.bias.grad += &grad.sum_axis(Axis(0)).insert_axis(Axis(0));
            grad = grad.dot(&layer.weight.value.t());
        }
        for layer in &self.layers {
            check_finite(&layer.weight.grad, "weight gradient")?;
            check_finite(&layer.bias.grad, "bias gradient")?;
        }
        check_finite(&grad, "input gradient")?;
        Ok(grad)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn check_input(&self, input: &Array2<f64>) -> Result<(), EngineError> {
        if input.ncols() != self.input_width() {
            return Err(EngineError::ShapeMismatch {
                expected: vec![input.nrows(), self.input_width()],
                got: input.shape().to_vec(),
            });
        }
        check_finite(input, "network input")
    }

    pub fn push_records(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for (i, l) in self.layers.iter().enumerate() {
            ckpt.push(Record::from_array(format!("{prefix}.{i}.weight"), &l.weight.value));
            ckpt.push(Record::from_array(format!("{prefix}.{i}.bias"), &l.bias.value));
        }
    }

    /// Loads weights saved by [`DenseNet::push_records`]; shapes must match.
    pub fn load_records(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<(), EngineError> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in [("weight", &mut l.weight), ("bias", &mut l.bias)] {
                let name = format!("{prefix}.{i}.{suffix}");
                let rec = ckpt.get(&name).ok_or_else(|| EngineError::MissingRecord(name.clone()))?;
                let arr = rec.to_array()?;
                expect_shape(&arr, &t.shape())?;
                t.value = arr;
                t.zero_grad();
            }
        }
        self.cache = None;
        Ok(())
    }
}

impl Parameterized for DenseNet {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}
