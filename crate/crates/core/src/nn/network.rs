//! Forward and backward passes.
//!
//! Activations travel feature-major: a batch of `U` samples with `d`
//! features is a `d × U` matrix, matching the `W · A` orientation of the
//! shift-add product. Quantized layers multiply through
//! [`shift_add_matmul`]; hidden activations are ReLU'd and then snapped to
//! the activation grid. The backward pass treats both weight and activation
//! quantizers as identity.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::conv::{channels_to_features, col2im, features_to_channels, im2col, ConvGeometry};
use super::model::{LayerKind, LayerWeights, LocalModel};
use crate::error::{Error, Result};
use crate::quant::{quantize_activations, shift_add_matmul};

/// What the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Matrix each layer's weights multiplied: the layer input for dense
    /// layers, the im2col patches for convolutions.
    lowered_inputs: Vec<Array2<f64>>,
    /// Pre-activation outputs, feature-major.
    pre_activations: Vec<Array2<f64>>,
    /// `classes × batch`.
    pub logits: Array2<f64>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.logits.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

fn geometry(kind: &LayerKind) -> Option<ConvGeometry> {
    match *kind {
        LayerKind::Conv2d {
            in_channels,
            kernel,
            in_height,
            in_width,
            ..
        } => Some(ConvGeometry {
            in_channels,
            kernel,
            in_height,
            in_width,
        }),
        LayerKind::Dense { .. } => None,
    }
}

fn multiply(weights: &LayerWeights, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    match weights {
        LayerWeights::Quantized(q) => shift_add_matmul(input, q),
        LayerWeights::Full(w) => {
            if w.ncols() != input.nrows() {
                return Err(Error::shape("forward", w.ncols(), input.nrows()));
            }
            Ok(w.dot(&input))
        }
    }
}

/// Runs a batch (`batch × features`, one sample per row) through the model.
/// Returns logits as `classes × batch`.
pub fn forward(
    model: &LocalModel,
    features: ArrayView2<'_, f64>,
    activation_bits: Option<u8>,
) -> Result<(Array2<f64>, ForwardCache)> {
    let expected = model.spec.input_features();
    if features.ncols() != expected {
        return Err(Error::shape("forward", format!("{expected} features"), features.ncols()));
    }
    let batch = features.nrows();
    let last = model.spec.layers.len() - 1;
    let mut activation = features.t().to_owned();
    let mut lowered_inputs = Vec::with_capacity(last + 1);
    let mut pre_activations = Vec::with_capacity(last + 1);

    for (l, kind) in model.spec.layers.iter().enumerate() {
        let bias = &model.biases[l];
        let z = match geometry(kind) {
            None => {
                let mut z = multiply(&model.weights[l], activation.view())?;
                z += &bias.view().insert_axis(Axis(1));
                lowered_inputs.push(activation);
                z
            }
            Some(g) => {
                let patches = im2col(activation.view(), g);
                let mut z = multiply(&model.weights[l], patches.view())?;
                z += &bias.view().insert_axis(Axis(1));
                lowered_inputs.push(patches);
                channels_to_features(z.view(), g.positions(), batch)
            }
        };
        if l == last {
            pre_activations.push(z.clone());
            activation = z;
        } else {
            let relu = z.mapv(|v| v.max(0.0));
            pre_activations.push(z);
            activation = match activation_bits {
                Some(bits) => quantize_activations(&relu, bits)?,
                None => relu,
            };
        }
    }

    let cache = ForwardCache {
        lowered_inputs,
        pre_activations,
        logits: activation.clone(),
    };
    Ok((activation, cache))
}

/// Column-wise softmax of `classes × batch` logits.
pub fn softmax_columns(logits: &Array2<f64>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut col in probs.columns_mut() {
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col.mapv_inplace(|v| v / sum);
    }
    probs
}

fn check_labels(logits: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.ncols() {
        return Err(Error::shape("labels", logits.ncols(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.nrows()) {
        return Err(Error::contract("labels", format!("label {bad} >= {} classes", logits.nrows())));
    }
    Ok(())
}

/// Mean softmax cross-entropy.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total: f64 = logits
        .columns()
        .into_iter()
        .zip(labels)
        .map(|(col, &y)| {
            let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let log_sum = col.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            log_sum - col[y]
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// `∂(mean cross-entropy)/∂logits = (softmax - one_hot) / batch`.
pub fn logits_gradient(logits: &Array2<f64>, labels: &[usize]) -> Result<Array2<f64>> {
    check_labels(logits, labels)?;
    let batch = labels.len() as f64;
    let mut grad = softmax_columns(logits);
    for (u, &y) in labels.iter().enumerate() {
        grad[[y, u]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / batch);
    Ok(grad)
}

/// Gradients of the mean cross-entropy with respect to the real-valued
/// weights (dequantized for bit-plane layers) and biases.
pub fn backward(model: &LocalModel, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
    let upstream = logits_gradient(&cache.logits, labels)?;
    backward_from(model, cache, upstream)
}

/// Back-propagates an arbitrary `classes × batch` logits gradient.
pub fn backward_from(model: &LocalModel, cache: &ForwardCache, upstream: Array2<f64>) -> Result<Gradients> {
    if upstream.dim() != cache.logits.dim() {
        return Err(Error::shape("backward", cache.logits.dim(), upstream.dim()));
    }
    let batch = cache.batch();
    let layers = model.spec.layers.len();
    let last = layers - 1;
    let mut weight_grads = vec![Array2::zeros((0, 0)); layers];
    let mut bias_grads = vec![Array1::zeros(0); layers];
    let mut grad = upstream;

    for l in (0..layers).rev() {
        if l != last {
            let z = &cache.pre_activations[l];
            grad.zip_mut_with(z, |g, &v| {
                if v <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        let weights = model.weights[l].to_dense();
        let lowered = &cache.lowered_inputs[l];
        match geometry(&model.spec.layers[l]) {
            None => {
                weight_grads[l] = grad.dot(&lowered.t());
                bias_grads[l] = grad.sum_axis(Axis(1));
                if l > 0 {
                    grad = weights.t().dot(&grad);
                }
            }
            Some(g) => {
                let per_channel = features_to_channels(grad.view(), g.positions());
                weight_grads[l] = per_channel.dot(&lowered.t());
                bias_grads[l] = per_channel.sum_axis(Axis(1));
                if l > 0 {
                    let patches = weights.t().dot(&per_channel);
                    grad = col2im(patches.view(), g, batch);
                }
            }
        }
    }
    Ok(Gradients {
        weights: weight_grads,
        biases: bias_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelSpec;
    use crate::quant::ScalePolicy;
    use ndarray::array;

    #[test]
    fn identity_dense_layer_passes_inputs() {
        let spec = ModelSpec::mlp(3, &[], 3).unwrap();
        // 2-bit range-covering with max |w| = 1 represents 0 and -1 exactly;
        // use the full-precision path for an exact identity.
        let model = LocalModel::full_precision(spec, vec![Array2::eye(3)], vec![Array1::zeros(3)]).unwrap();
        let x = array![[0.5, -1.0, 2.0], [1.0, 0.0, 3.0]];
        let (logits, _) = forward(&model, x.view(), Some(4)).unwrap();
        assert_eq!(logits, x.t());
    }

    #[test]
    fn zero_model_gives_uniform_loss() {
        let spec = ModelSpec::mlp(4, &[5], 3).unwrap();
        let weights = vec![Array2::zeros((5, 4)), Array2::zeros((3, 5))];
        let biases = vec![Array1::zeros(5), Array1::zeros(3)];
        let model = LocalModel::quantized(spec, &weights, biases, &[4, 4], ScalePolicy::RangeCovering).unwrap();
        let x = array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.5, 0.0, 2.0]];
        let (logits, _) = forward(&model, x.view(), Some(4)).unwrap();
        let loss = cross_entropy(&logits, &[0, 2]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_prediction_gradient() {
        let logits = Array2::zeros((4, 1));
        let g = logits_gradient(&logits, &[2]).unwrap();
        assert_eq!(g.column(0).to_vec(), vec![0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = ModelSpec::mlp(3, &[4], 2).unwrap();
        let weights = vec![Array2::from_elem((4, 3), 0.3), Array2::from_elem((2, 4), -0.2)];
        let model = LocalModel::full_precision(spec, weights, vec![Array1::zeros(4), Array1::zeros(2)]).unwrap();
        let x = array![[1.0, 2.0, 3.0]];
        let (_, cache) = forward(&model, x.view(), None).unwrap();
        let grads = backward_from(&model, &cache, Array2::zeros((2, 1))).unwrap();
        assert!(grads.weights.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn wrong_feature_count_is_rejected() {
        let spec = ModelSpec::mlp(3, &[], 2).unwrap();
        let model = LocalModel::full_precision(spec, vec![Array2::zeros((2, 3))], vec![Array1::zeros(2)]).unwrap();
        assert!(forward(&model, Array2::zeros((1, 4)).view(), None).is_err());
    }
}
