//! Client-side training: the regularized local objective, the local update
//! loop with post-training MSB pruning, and evaluation.

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{backward, cross_entropy, forward, LayerWeights, LocalModel};
use crate::quant::{plane_density, prune_msbs, DensityProfile, ScalePolicy};
use crate::ste::{group_lasso, sgd_step, SgdConfig, UpdateContext};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Local epochs per round (τ).
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Group Lasso weight (λ).
    pub lambda: f64,
    /// MSB pruning threshold (ε).
    pub epsilon: f64,
    /// Set from the experiment's ablation toggles, not read from config files.
    #[serde(skip)]
    pub prune_msbs: bool,
    /// Hidden-activation bit-width; 0 disables activation quantization.
    pub activation_bits: u8,
    pub scale_policy: ScalePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            local_epochs: 5,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda: 0.01,
            epsilon: 0.03,
            prune_msbs: true,
            activation_bits: 4,
            scale_policy: ScalePolicy::RangeCovering,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.local_epochs == 0 {
            return fail("local_epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return fail(format!("epsilon must be in [0, 1], got {}", self.epsilon));
        }
        if self.activation_bits > 8 {
            return fail(format!("activation_bits must be in [0, 8], got {}", self.activation_bits));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn activation_bits(&self) -> Option<u8> {
        (self.activation_bits > 0).then_some(self.activation_bits)
    }
}

/// Task cross-entropy plus `λ Σ_l (M^(l)/M) R_GL(B^(l))`. Full-precision
/// layers contribute no penalty.
pub fn local_objective(
    model: &LocalModel,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    lambda: f64,
    activation_bits: Option<u8>,
) -> Result<f64> {
    let (logits, _) = forward(model, features, activation_bits)?;
    let task = cross_entropy(&logits, labels)?;
    Ok(task + lambda * lasso_penalty(model))
}

/// `Σ_l (M^(l)/M) R_GL(B^(l))`, the slope of the local objective in λ.
pub fn lasso_penalty(model: &LocalModel) -> f64 {
    model
        .spec
        .layer_fractions()
        .iter()
        .zip(&model.weights)
        .filter_map(|(fraction, w)| w.as_quantized().map(|q| fraction * group_lasso(q).0))
        .sum()
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub model: LocalModel,
    /// Bit-widths after pruning.
    pub bit_widths: Vec<u8>,
    /// Plane densities of each quantized layer just before pruning.
    pub pre_prune_density: Vec<Option<DensityProfile>>,
}

/// `τ` epochs of minibatch SGD followed by MSB pruning of every layer.
pub fn local_update<R: Rng>(model: &LocalModel, shard: &Dataset, cfg: &TrainConfig, rng: &mut R) -> Result<LocalOutcome> {
    cfg.validate()?;
    if shard.is_empty() {
        warn!("empty shard; returning the model unchanged");
        return Ok(LocalOutcome {
            bit_widths: model.bit_widths(),
            pre_prune_density: density_snapshot(model),
            model: model.clone(),
        });
    }

    let mut model = model.clone();
    let sgd = cfg.sgd();
    let lasso_weights: Vec<f64> = model.spec.layer_fractions().iter().map(|f| cfg.lambda * f).collect();
    let mut weight_buffers: Vec<Array2<f64>> = model.weights.iter().map(|w| Array2::zeros(w.shape())).collect();
    let mut bias_buffers: Vec<Array1<f64>> = model.biases.iter().map(|b| Array1::zeros(b.len())).collect();
    let mut order: Vec<usize> = (0..shard.len()).collect();

    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let features = shard.features.select(Axis(0), batch);
            let labels: Vec<usize> = batch.iter().map(|&i| shard.labels[i]).collect();
            let (_, cache) = forward(&model, features.view(), cfg.activation_bits())?;
            let grads = backward(&model, &cache, &labels)?;

            for (l, grad_w) in grads.weights.iter().enumerate() {
                let updated = match &model.weights[l] {
                    LayerWeights::Quantized(layer) => {
                        let mut ctx = UpdateContext {
                            sgd,
                            momentum_buffer: &mut weight_buffers[l],
                            rng: &mut *rng,
                        };
                        LayerWeights::Quantized(sgd_step(layer, grad_w, &mut ctx, lasso_weights[l])?)
                    }
                    LayerWeights::Full(w) => {
                        let mut w = w.clone();
                        full_precision_step(&mut w, grad_w, &mut weight_buffers[l], sgd);
                        LayerWeights::Full(w)
                    }
                };
                model.weights[l] = updated;
            }
            for ((bias, grad_b), buffer) in model.biases.iter_mut().zip(&grads.biases).zip(&mut bias_buffers) {
                full_precision_step(bias, grad_b, buffer, sgd);
            }
        }
    }

    let pre_prune_density = density_snapshot(&model);
    if cfg.prune_msbs {
        for w in &mut model.weights {
            if let LayerWeights::Quantized(layer) = w {
                let (pruned, _) = prune_msbs(layer, cfg.epsilon, cfg.scale_policy)?;
                *layer = pruned;
            }
        }
    }
    Ok(LocalOutcome {
        bit_widths: model.bit_widths(),
        pre_prune_density,
        model,
    })
}

fn density_snapshot(model: &LocalModel) -> Vec<Option<DensityProfile>> {
    model.weights.iter().map(|w| w.as_quantized().map(plane_density)).collect()
}

/// Heavy-ball SGD with L2 decay on a full-precision tensor.
fn full_precision_step<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    buffer: &mut ndarray::Array<f64, D>,
    sgd: SgdConfig,
) {
    ndarray::Zip::from(&mut *buffer)
        .and(&*param)
        .and(grad)
        .for_each(|b, &p, &g| *b = sgd.momentum * *b + g + sgd.weight_decay * p);
    param.scaled_add(-sgd.learning_rate, buffer);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

const EVAL_BATCH: usize = 256;

/// Mean cross-entropy and accuracy over a dataset.
pub fn evaluate(model: &LocalModel, data: &Dataset, activation_bits: Option<u8>, exec: Execution) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let chunks = data.len().div_ceil(EVAL_BATCH);
    let parts = exec.map_range(chunks, |c| -> Result<(f64, usize)> {
        let start = c * EVAL_BATCH;
        let end = (start + EVAL_BATCH).min(data.len());
        let labels = &data.labels[start..end];
        let (logits, _) = forward(model, data.features.slice(ndarray::s![start..end, ..]), activation_bits)?;
        let loss_sum = cross_entropy(&logits, labels)? * labels.len() as f64;
        let correct = logits
            .columns()
            .into_iter()
            .zip(labels)
            .filter(|(col, &y)| argmax(col.iter().copied()) == y)
            .count();
        Ok((loss_sum, correct))
    });
    let mut loss = 0.0;
    let mut correct = 0;
    for part in parts {
        let (l, c) = part?;
        loss += l;
        correct += c;
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Index of the first maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BlobsConfig;
    use crate::nn::ModelSpec;
    use crate::rng::{stream, Purpose};

    fn tiny_setup(bits: u8) -> (LocalModel, Dataset) {
        let blobs = BlobsConfig {
            classes: 3,
            dim: 6,
            train_per_class: 30,
            test_per_class: 10,
            center_spread: 2.0,
            noise: 0.5,
        };
        let (train, _) = blobs.generate(1).unwrap();
        let spec = ModelSpec::mlp(6, &[8], 3).unwrap();
        let (w, b) = spec.init_full(&mut stream(1, Purpose::Init));
        let model = LocalModel::quantized(spec, &w, b, &[bits, bits], ScalePolicy::RangeCovering).unwrap();
        (model, train)
    }

    #[test]
    fn lambda_zero_objective_is_task_loss() {
        let (model, data) = tiny_setup(4);
        let task = local_objective(&model, data.features.view(), &data.labels, 0.0, Some(4)).unwrap();
        let (logits, _) = forward(&model, data.features.view(), Some(4)).unwrap();
        assert_eq!(task, cross_entropy(&logits, &data.labels).unwrap());
        let with = local_objective(&model, data.features.view(), &data.labels, 0.5, Some(4)).unwrap();
        assert!((with - task - 0.5 * lasso_penalty(&model)).abs() < 1e-12);
    }

    #[test]
    fn empty_shard_is_a_no_op() {
        let (model, data) = tiny_setup(4);
        let empty = data.subset(&[]);
        let out = local_update(&model, &empty, &TrainConfig::default(), &mut stream(0, Purpose::Init)).unwrap();
        assert_eq!(out.model, model);
    }

    #[test]
    fn epsilon_one_collapses_every_layer_to_one_bit() {
        let (model, data) = tiny_setup(6);
        let cfg = TrainConfig {
            local_epochs: 1,
            epsilon: 1.0,
            ..TrainConfig::default()
        };
        let out = local_update(&model, &data, &cfg, &mut stream(0, Purpose::Init)).unwrap();
        assert_eq!(out.bit_widths, vec![1, 1]);
    }

    #[test]
    fn local_update_is_deterministic_and_never_widens() {
        let (model, data) = tiny_setup(5);
        let cfg = TrainConfig {
            local_epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let a = local_update(&model, &data, &cfg, &mut stream(3, Purpose::Init)).unwrap();
        let b = local_update(&model, &data, &cfg, &mut stream(3, Purpose::Init)).unwrap();
        assert_eq!(a.model, b.model);
        assert!(a.bit_widths.iter().all(|&w| (1..=5).contains(&w)));
    }

    #[test]
    fn evaluation_is_deterministic_and_rejects_empty() {
        let (model, data) = tiny_setup(4);
        let a = evaluate(&model, &data, Some(4), Execution::Parallel).unwrap();
        let b = evaluate(&model, &data, Some(4), Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert!(evaluate(&model, &data.subset(&[]), None, Execution::Sequential).is_err());
    }

    #[test]
    fn training_reduces_loss() {
        let (model, data) = tiny_setup(8);
        let before = evaluate(&model, &data, Some(4), Execution::Sequential).unwrap();
        let cfg = TrainConfig {
            local_epochs: 10,
            batch_size: 16,
            lambda: 0.0,
            prune_msbs: false,
            ..TrainConfig::default()
        };
        let out = local_update(&model, &data, &cfg, &mut stream(5, Purpose::Init)).unwrap();
        let after = evaluate(&out.model, &data, Some(4), Execution::Sequential).unwrap();
        assert!(after.loss < before.loss, "{} -> {}", before.loss, after.loss);
    }
}
