use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{quantize, QuantizedLayer, ScalePolicy};

/// One weight-bearing layer. Every layer but the last is followed by ReLU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Stride 1, no padding. Input features are laid out channel-major
    /// (`c * height * width + y * width + x`).
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        in_height: usize,
        in_width: usize,
    },
}

impl LayerKind {
    /// Shape of the weight matrix: `(outputs, inputs)` for dense layers,
    /// `(out_channels, in_channels * kernel^2)` for convolutions.
    pub fn weight_shape(&self) -> (usize, usize) {
        match *self {
            LayerKind::Dense { inputs, outputs } => (outputs, inputs),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (out_channels, in_channels * kernel * kernel),
        }
    }

    pub fn input_features(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv2d {
                in_channels,
                in_height,
                in_width,
                ..
            } => in_channels * in_height * in_width,
        }
    }

    pub fn output_features(&self) -> usize {
        match *self {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv2d { out_channels, .. } => {
                let (h, w) = self.output_hw();
                out_channels * h * w
            }
        }
    }

    /// Spatial output size of a convolution; `(1, 1)` for dense layers.
    pub fn output_hw(&self) -> (usize, usize) {
        match *self {
            LayerKind::Dense { .. } => (1, 1),
            LayerKind::Conv2d {
                kernel,
                in_height,
                in_width,
                ..
            } => (in_height + 1 - kernel, in_width + 1 - kernel),
        }
    }

    pub fn bias_len(&self) -> usize {
        self.weight_shape().0
    }

    pub fn param_count(&self) -> u64 {
        let (r, c) = self.weight_shape();
        (r * c) as u64
    }

    fn fan_in(&self) -> usize {
        self.weight_shape().1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerKind>,
}

impl ModelSpec {
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(inputs)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect();
        let layers = widths
            .windows(2)
            .map(|w| LayerKind::Dense {
                inputs: w[0],
                outputs: w[1],
            })
            .collect();
        let spec = ModelSpec { layers };
        spec.validate()?;
        Ok(spec)
    }

    /// Convolutions with the given output channels, then one dense layer.
    pub fn conv_net(
        (channels, height, width): (usize, usize, usize),
        conv_channels: &[usize],
        kernel: usize,
        classes: usize,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let (mut c, mut h, mut w) = (channels, height, width);
        for &out in conv_channels {
            if kernel == 0 || kernel > h || kernel > w {
                return Err(Error::Config(format!(
                    "kernel {kernel} does not fit a {h}x{w} input"
                )));
            }
            layers.push(LayerKind::Conv2d {
                in_channels: c,
                out_channels: out,
                kernel,
                in_height: h,
                in_width: w,
            });
            c = out;
            h = h + 1 - kernel;
            w = w + 1 - kernel;
        }
        layers.push(LayerKind::Dense {
            inputs: c * h * w,
            outputs: classes,
        });
        let spec = ModelSpec { layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("model has no layers".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.param_count() == 0 || layer.output_features() == 0 {
                return Err(Error::Config(format!("layer {l} has no parameters")));
            }
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_features() != pair[1].input_features() {
                return Err(Error::Config(format!(
                    "layer {l} emits {} features but layer {} expects {}",
                    pair[0].output_features(),
                    l + 1,
                    pair[1].input_features()
                )));
            }
        }
        Ok(())
    }

    pub fn input_features(&self) -> usize {
        self.layers[0].input_features()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("validated non-empty").output_features()
    }

    /// Parameters per layer, `m = {M^(1), ..., M^(L)}`.
    pub fn param_counts(&self) -> Vec<u64> {
        self.layers.iter().map(LayerKind::param_count).collect()
    }

    pub fn total_params(&self) -> u64 {
        self.param_counts().iter().sum()
    }

    /// `M^(l) / M` for each layer; sums to one.
    pub fn layer_fractions(&self) -> Vec<f64> {
        let total = self.total_params() as f64;
        self.param_counts().iter().map(|&m| m as f64 / total).collect()
    }

    /// He-uniform weights and zero biases in full precision.
    pub fn init_full<R: Rng>(&self, rng: &mut R) -> (Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let weights = self
            .layers
            .iter()
            .map(|layer| {
                let bound = (6.0 / layer.fan_in() as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Array2::from_shape_simple_fn(layer.weight_shape(), || dist.sample(rng))
            })
            .collect();
        let biases = self.layers.iter().map(|l| Array1::zeros(l.bias_len())).collect();
        (weights, biases)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Quantized(QuantizedLayer),
    Full(Array2<f64>),
}

impl LayerWeights {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            LayerWeights::Quantized(q) => q.shape(),
            LayerWeights::Full(w) => w.dim(),
        }
    }

    /// Real-valued weights this layer computes with.
    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            LayerWeights::Quantized(q) => q.dequantize(),
            LayerWeights::Full(w) => w.clone(),
        }
    }

    pub fn as_quantized(&self) -> Option<&QuantizedLayer> {
        match self {
            LayerWeights::Quantized(q) => Some(q),
            LayerWeights::Full(_) => None,
        }
    }

    /// Bits per stored parameter; 32 for full precision.
    pub fn bit_width(&self) -> u8 {
        match self {
            LayerWeights::Quantized(q) => q.bit_width(),
            LayerWeights::Full(_) => 32,
        }
    }
}

/// A client's working model.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    pub spec: ModelSpec,
    pub weights: Vec<LayerWeights>,
    pub biases: Vec<Array1<f64>>,
}

impl LocalModel {
    pub fn new(spec: ModelSpec, weights: Vec<LayerWeights>, biases: Vec<Array1<f64>>) -> Result<Self> {
        if weights.len() != spec.layers.len() || biases.len() != spec.layers.len() {
            return Err(Error::shape(
                "LocalModel::new",
                spec.layers.len(),
                (weights.len(), biases.len()),
            ));
        }
        for (l, layer) in spec.layers.iter().enumerate() {
            if weights[l].shape() != layer.weight_shape() {
                return Err(Error::shape("LocalModel::new", layer.weight_shape(), weights[l].shape()));
            }
            if biases[l].len() != layer.bias_len() {
                return Err(Error::shape("LocalModel::new", layer.bias_len(), biases[l].len()));
            }
        }
        Ok(LocalModel {
            spec,
            weights,
            biases,
        })
    }

    /// Quantizes full-precision weights at the given per-layer bit-widths.
    pub fn quantized(
        spec: ModelSpec,
        weights: &[Array2<f64>],
        biases: Vec<Array1<f64>>,
        bit_widths: &[u8],
        policy: ScalePolicy,
    ) -> Result<Self> {
        if bit_widths.len() != weights.len() {
            return Err(Error::shape("LocalModel::quantized", weights.len(), bit_widths.len()));
        }
        let layers = weights
            .iter()
            .zip(bit_widths)
            .map(|(w, &b)| quantize(w.view(), b, policy).map(LayerWeights::Quantized))
            .collect::<Result<Vec<_>>>()?;
        LocalModel::new(spec, layers, biases)
    }

    pub fn full_precision(spec: ModelSpec, weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>) -> Result<Self> {
        LocalModel::new(spec, weights.into_iter().map(LayerWeights::Full).collect(), biases)
    }

    pub fn bit_widths(&self) -> Vec<u8> {
        self.weights.iter().map(LayerWeights::bit_width).collect()
    }

    pub fn is_quantized(&self) -> bool {
        self.weights.iter().all(|w| matches!(w, LayerWeights::Quantized(_)))
    }

    /// Parameter-weighted mean bit-width, `b · m / ‖m‖₁`.
    pub fn average_bit_width(&self) -> f64 {
        weighted_average_bits(&self.bit_widths(), &self.spec.param_counts())
    }
}

/// `b · m / ‖m‖₁`.
pub fn weighted_average_bits(bits: &[u8], params: &[u64]) -> f64 {
    let total: u64 = params.iter().sum();
    bits.iter()
        .zip(params)
        .map(|(&b, &m)| f64::from(b) * m as f64)
        .sum::<f64>()
        / total as f64
}
