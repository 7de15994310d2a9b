//! Straight-through gradients and integer-only parameter updates.
//!
//! The task gradient with respect to a weight is copied onto every plane,
//! scaled by that plane's significance. An update is then assembled from
//! power-of-two pieces so that the weight moves by a whole number of grid
//! steps: oversized updates are clipped to one full scale, and pieces
//! smaller than one grid step are collected into a probability that decides
//! whether a single minimum step is taken.

use ndarray::{Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantizedLayer;

/// Gradient of the loss with respect to each binary plane, LSB first.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneGradient {
    pub planes: Vec<Array2<f64>>,
}

impl PlaneGradient {
    pub fn zeros(layer: &QuantizedLayer) -> Self {
        PlaneGradient {
            planes: vec![Array2::zeros(layer.shape()); usize::from(layer.bit_width())],
        }
    }

    pub fn bit_width(&self) -> usize {
        self.planes.len()
    }

    /// `self += alpha * other`, plane by plane.
    pub fn add_scaled(&mut self, alpha: f64, other: &PlaneGradient) {
        for (mine, theirs) in self.planes.iter_mut().zip(&other.planes) {
            mine.scaled_add(alpha, theirs);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Per-layer optimizer state for one local round.
pub struct UpdateContext<'a, R: Rng> {
    pub sgd: SgdConfig,
    /// Full-precision momentum buffer, same shape as the layer.
    pub momentum_buffer: &'a mut Array2<f64>,
    pub rng: &'a mut R,
}

fn check_shape(op: &'static str, layer: &QuantizedLayer, got: (usize, usize)) -> Result<()> {
    if got == layer.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, layer.shape(), got))
    }
}

/// `∂L/∂B_i = s 2^(i-1) / (2^b - 1) · ∂L/∂W` for every plane.
pub fn ste_backward(grad_w: &Array2<f64>, layer: &QuantizedLayer) -> Result<PlaneGradient> {
    check_shape("ste_backward", layer, grad_w.dim())?;
    let step = layer.step();
    let planes = (0..layer.bit_width())
        .map(|bit| {
            let factor = step * f64::from(1u32 << bit);
            grad_w.mapv(|g| factor * g)
        })
        .collect();
    Ok(PlaneGradient { planes })
}

/// Nearest power of two, `2^round(log2 x)` with ties rounded up; zero maps
/// to zero.
pub fn power_of_two(x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::contract("power_of_two", format!("expected x >= 0, got {x}")));
    }
    Ok(match nearest_exponent(x) {
        Some(e) => 2f64.powi(e),
        None => 0.0,
    })
}

/// `round(log2 x)` for positive finite `x`, `None` for zero.
fn nearest_exponent(x: f64) -> Option<i32> {
    if x == 0.0 {
        return None;
    }
    Some((x.log2() + 0.5).floor() as i32)
}

/// Group Lasso over planes: `Σ_i ‖B_i‖₂`. The gradient of plane `i` is
/// `B_i / ‖B_i‖₂`, taken as zero for an empty plane.
pub fn group_lasso(layer: &QuantizedLayer) -> (f64, PlaneGradient) {
    let shape = layer.shape();
    let mut value = 0.0;
    let planes = layer
        .planes()
        .iter()
        .map(|plane| {
            let ones = plane.count_ones();
            if ones == 0 {
                return Array2::zeros(shape);
            }
            let norm = (ones as f64).sqrt();
            value += norm;
            let inv = 1.0 / norm;
            let cells: Vec<f64> = plane.iter().map(|b| if b { inv } else { 0.0 }).collect();
            Array2::from_shape_vec(shape, cells).expect("plane length matches layer")
        })
        .collect();
    (value, PlaneGradient { planes })
}

/// The exponents `q_i` of one entry's update pieces, LSB first.
///
/// Each plane gradient is mapped back to weight units by dividing out its
/// chain-rule factor `s 2^(i-1) / (2^b - 1)`; its step-scaled magnitude is
/// snapped to a power of two `2^e` and the piece contributes `2^(q_i - 1)`
/// grid steps with `q_i = i + e`. A plane with zero gradient contributes
/// nothing (`None`). For task-only gradients every plane maps back to the
/// same weight gradient, so `q_{i+1} = q_i + 1`.
pub fn plane_exponents(grads: &[f64], step: f64, learning_rate: f64) -> Vec<Option<i32>> {
    grads
        .iter()
        .enumerate()
        .map(|(bit, &g)| {
            let weight_units = g.abs() / (step * f64::from(1u32 << bit));
            nearest_exponent(learning_rate * weight_units).map(|e| bit as i32 + 1 + e)
        })
        .collect()
}

/// Integer and fractional grid-step counts assembled from the exponents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepBudget {
    /// Whole grid steps, already capped at `2^b - 1`.
    pub whole: u32,
    /// Probability of one extra minimum step, in `[0, 1)`.
    pub fraction: f64,
    pub clipped: bool,
}

pub fn step_budget(exponents: &[Option<i32>], bit_width: u8) -> StepBudget {
    let cap = (1u32 << bit_width) - 1;
    let present = exponents.iter().flatten();
    if present.clone().any(|&q| q > i32::from(bit_width)) {
        return StepBudget {
            whole: cap,
            fraction: 0.0,
            clipped: true,
        };
    }
    let mut whole = 0u32;
    let mut fraction = 0.0f64;
    for &q in present {
        if q >= 1 {
            whole += 1u32 << (q - 1);
        } else {
            fraction += 2f64.powi(q - 1);
        }
    }
    // Only reachable when regularizer terms break the geometric ladder.
    if fraction >= 1.0 {
        let carry = fraction.floor();
        whole += carry as u32;
        fraction -= carry;
    }
    if whole >= cap {
        return StepBudget {
            whole: cap,
            fraction: 0.0,
            clipped: true,
        };
    }
    StepBudget {
        whole,
        fraction,
        clipped: false,
    }
}

/// Signed number of grid steps to move each weight.
pub fn fixed_point_steps<R: Rng>(
    plane_grads: &PlaneGradient,
    layer: &QuantizedLayer,
    learning_rate: f64,
    rng: &mut R,
) -> Result<Array2<i32>> {
    const OP: &str = "fixed_point_steps";
    if plane_grads.bit_width() != usize::from(layer.bit_width()) {
        return Err(Error::shape(OP, layer.bit_width(), plane_grads.bit_width()));
    }
    for plane in &plane_grads.planes {
        check_shape(OP, layer, plane.dim())?;
    }
    let step = layer.step();
    let bits = usize::from(layer.bit_width());
    let mut steps = Array2::<i32>::zeros(layer.shape());
    let mut entry = vec![0.0f64; bits];
    for ((j, k), out) in steps.indexed_iter_mut() {
        let mut direction = 0.0;
        for (bit, plane) in plane_grads.planes.iter().enumerate() {
            entry[bit] = plane[[j, k]];
            direction += f64::from(1u32 << bit) * entry[bit];
        }
        if direction == 0.0 {
            continue;
        }
        let exponents = plane_exponents(&entry, step, learning_rate);
        let budget = step_budget(&exponents, layer.bit_width());
        let mut count = budget.whole;
        if budget.fraction > 0.0 && rng.random::<f64>() < budget.fraction {
            count += 1;
        }
        let count = count as i32;
        *out = if direction > 0.0 { -count } else { count };
    }
    Ok(steps)
}

/// Weight update on the fixed-point grid: `ΔW = steps · s/(2^b - 1)`.
pub fn fixed_point_delta<R: Rng>(
    plane_grads: &PlaneGradient,
    layer: &QuantizedLayer,
    learning_rate: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let step = layer.step();
    Ok(fixed_point_steps(plane_grads, layer, learning_rate, rng)?.mapv(|n| f64::from(n) * step))
}

/// Adds an on-grid delta and clips to the layer's range; scale and
/// zero-point are unchanged.
pub fn apply_update(layer: &QuantizedLayer, delta: &Array2<f64>) -> Result<QuantizedLayer> {
    const OP: &str = "apply_update";
    check_shape(OP, layer, delta.dim())?;
    let step = layer.step();
    let mut steps = Array2::<i32>::zeros(delta.dim());
    let mut off_grid = None;
    Zip::from(&mut steps).and(delta).for_each(|n, &d| {
        let units = d / step;
        let rounded = units.round();
        if !units.is_finite() || (units - rounded).abs() > 1e-6 * rounded.abs().max(1.0) {
            off_grid.get_or_insert(d);
        }
        *n = rounded as i32;
    });
    if let Some(d) = off_grid {
        return Err(Error::contract(
            OP,
            format!("delta {d} is not a multiple of the grid step {step}"),
        ));
    }
    apply_steps(layer, &steps)
}

pub fn apply_steps(layer: &QuantizedLayer, steps: &Array2<i32>) -> Result<QuantizedLayer> {
    check_shape("apply_steps", layer, steps.dim())?;
    let top = layer.levels() as i32;
    let codes: Vec<u8> = layer
        .codes()
        .into_iter()
        .zip(steps.iter())
        .map(|(c, &n)| (i32::from(c) + n).clamp(0, top) as u8)
        .collect();
    layer.with_codes(&codes)
}

/// One optimizer step on a quantized layer.
///
/// Weight decay is added to the task gradient and folded into the momentum
/// buffer in full precision; the buffer is pushed through the STE, the
/// Lasso plane gradients (weighted by `lasso_weight`) are added, and the
/// result is applied as an on-grid update.
pub fn sgd_step<R: Rng>(
    layer: &QuantizedLayer,
    grad_w_task: &Array2<f64>,
    ctx: &mut UpdateContext<'_, R>,
    lasso_weight: f64,
) -> Result<QuantizedLayer> {
    const OP: &str = "sgd_step";
    if lasso_weight.is_nan() || lasso_weight < 0.0 {
        return Err(Error::contract(OP, format!("lasso weight {lasso_weight} must be >= 0")));
    }
    check_shape(OP, layer, grad_w_task.dim())?;
    check_shape(OP, layer, ctx.momentum_buffer.dim())?;
    let SgdConfig {
        learning_rate,
        momentum,
        weight_decay,
    } = ctx.sgd;

    let mut grad = grad_w_task.clone();
    if weight_decay != 0.0 {
        grad.scaled_add(weight_decay, &layer.dequantize());
    }
    if momentum != 0.0 {
        ctx.momentum_buffer.zip_mut_with(&grad, |b, &g| *b = momentum * *b + g);
    } else {
        ctx.momentum_buffer.assign(&grad);
    }

    let mut plane_grads = ste_backward(ctx.momentum_buffer, layer)?;
    if lasso_weight > 0.0 {
        let (_, lasso) = group_lasso(layer);
        plane_grads.add_scaled(lasso_weight, &lasso);
    }
    let steps = fixed_point_steps(&plane_grads, layer, learning_rate, ctx.rng)?;
    apply_steps(layer, &steps)
}
