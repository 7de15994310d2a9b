//! Server side of a round: de-quantize uploads, aggregate, and build each
//! client's next bit-width assignment and quantized model.

use log::debug;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LocalModel, ModelSpec};
use crate::quant::{ScalePolicy, MAX_BITS, MIN_BITS};

/// What one client uploads after local training.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub model: LocalModel,
    /// Samples in the client's shard, `|D_n|`.
    pub shard_size: usize,
    /// Bit budget used for aggregation weighting, `v_n`.
    pub budget: f64,
}

impl ClientUpdate {
    pub fn bit_widths(&self) -> Vec<u8> {
        self.model.bit_widths()
    }
}

/// Full-precision weights of an upload.
pub fn convert_to_fp(update: &ClientUpdate) -> Vec<Array2<f64>> {
    update.model.weights.iter().map(|w| w.to_dense()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub spec: ModelSpec,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    /// Aggregated per-layer bit-widths; fractional in general.
    pub bit_widths: Vec<f64>,
    pub round: u64,
}

#[derive(Debug, Clone)]
pub struct Aggregate {
    pub model: GlobalModel,
    /// `(client_id, p_n)` in client-id order.
    pub weights: Vec<(usize, f64)>,
}

/// `p_n = v_n |D_n| / Σ_i v_i |D_i|`; `W = Σ p_n W_n`, `b = Σ p_n b_n`.
/// Biases are combined with the same weights. Updates are combined in
/// client-id order whatever order they arrive in.
pub fn aggregate(updates: &[ClientUpdate], round: u64) -> Result<Aggregate> {
    let first = updates.first().ok_or(Error::NoUpdates)?;
    let spec = first.model.spec.clone();
    if let Some(u) = updates.iter().find(|u| u.model.spec != spec) {
        return Err(Error::contract(
            "aggregate",
            format!("client {} uploaded a different architecture", u.client_id),
        ));
    }
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);

    let mass: Vec<f64> = ordered.iter().map(|u| u.budget * u.shard_size as f64).collect();
    let total: f64 = mass.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::contract("aggregate", "total budget-weighted sample count is zero"));
    }
    let p: Vec<f64> = mass.iter().map(|m| m / total).collect();

    let mut weights: Vec<Array2<f64>> = spec.layers.iter().map(|l| Array2::zeros(l.weight_shape())).collect();
    let mut biases: Vec<Array1<f64>> = spec.layers.iter().map(|l| Array1::zeros(l.bias_len())).collect();
    let mut bits = vec![0.0; spec.layers.len()];
    for (update, &p_n) in ordered.iter().zip(&p) {
        for (acc, w) in weights.iter_mut().zip(convert_to_fp(update)) {
            acc.scaled_add(p_n, &w);
        }
        for (acc, b) in biases.iter_mut().zip(&update.model.biases) {
            acc.scaled_add(p_n, b);
        }
        for (acc, b) in bits.iter_mut().zip(update.bit_widths()) {
            *acc += p_n * f64::from(b);
        }
    }
    Ok(Aggregate {
        model: GlobalModel {
            spec,
            weights,
            biases,
            bit_widths: bits,
            round,
        },
        weights: ordered.iter().map(|u| u.client_id).zip(p).collect(),
    })
}

/// Nearest integer per layer with ties to even, clamped to `[1, 8]`.
pub fn round_bitwidths(bits: &[f64]) -> Vec<u8> {
    bits.iter()
        .map(|b| b.round_ties_even().clamp(f64::from(MIN_BITS), f64::from(MAX_BITS)) as u8)
        .collect()
}

/// Layers ordered by `m ⊙ (Δb + 1)` descending; equal keys keep the lower
/// layer index first.
pub fn priority_order(params: &[u64], delta: &[u8]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..params.len()).collect();
    order.sort_by_key(|&l| std::cmp::Reverse(params[l] * (u64::from(delta[l]) + 1)));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adjustment {
    Unchanged,
    Pruned,
    Grown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub bits: Vec<u8>,
    /// Average bit-width as tracked incrementally by the greedy walk.
    pub average: f64,
    pub adjustment: Adjustment,
}

/// Greedy per-client bit reallocation.
///
/// Starting from `bits` with average `v = b · m / ‖m‖₁`: when `v > budget`,
/// walk the priority order from the front, removing one bit at a time from
/// the current layer (floor of one bit, then move on) until `v <= budget`.
/// When `v < budget`, walk from the back of the order, adding bits (cap of
/// eight, then move forward) while `v < budget` and the cursor is above
/// zero; the front layer is never grown and the last addition may overshoot.
pub fn pruning_growing(bits: &[u8], delta: &[u8], params: &[u64], budget: f64) -> Result<Assignment> {
    const OP: &str = "pruning_growing";
    if bits.len() != params.len() || delta.len() != params.len() {
        return Err(Error::shape(OP, params.len(), (bits.len(), delta.len())));
    }
    if let Some(b) = bits.iter().find(|b| !(MIN_BITS..=MAX_BITS).contains(b)) {
        return Err(Error::contract(OP, format!("bit width {b} outside [1, 8]")));
    }
    // Exact integer bookkeeping of Σ b·m keeps the comparisons against the
    // budget free of accumulated rounding.
    let total = params.iter().sum::<u64>();
    let limit = budget * total as f64;
    let mut out = bits.to_vec();
    let mut weighted: u64 = out.iter().zip(params).map(|(&b, &m)| u64::from(b) * m).sum();
    let order = priority_order(params, delta);
    let layers = params.len();

    let adjustment = if weighted as f64 > limit {
        let mut cur = 0;
        while weighted as f64 > limit && cur < layers {
            let l = order[cur];
            if out[l] > MIN_BITS {
                out[l] -= 1;
                weighted -= params[l];
            } else {
                cur += 1;
            }
        }
        Adjustment::Pruned
    } else if (weighted as f64) < limit {
        let mut cur = layers - 1;
        while (weighted as f64) < limit && cur > 0 {
            let l = order[cur];
            if out[l] < MAX_BITS {
                out[l] += 1;
                weighted += params[l];
            } else {
                cur -= 1;
            }
        }
        if weighted as f64 > limit {
            debug!("growing overshot budget {budget} to {}", weighted as f64 / total as f64);
        }
        Adjustment::Grown
    } else {
        Adjustment::Unchanged
    };
    let v = weighted as f64 / total as f64;
    Ok(Assignment {
        bits: out,
        average: v,
        adjustment,
    })
}

/// Per-client record of how many bits each layer lost during the client's
/// last local training, `Δb_n = b̂_n - b_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    deltas: Vec<Vec<u8>>,
}

impl BudgetLedger {
    pub fn new(clients: usize, layers: usize) -> Self {
        BudgetLedger {
            deltas: vec![vec![0; layers]; clients],
        }
    }

    pub fn record(&mut self, client: usize, delivered: &[u8], uploaded: &[u8]) -> Result<()> {
        let delta = delivered
            .iter()
            .zip(uploaded)
            .map(|(&d, &u)| {
                d.checked_sub(u).ok_or_else(|| {
                    Error::contract("BudgetLedger::record", format!("client {client} widened a layer from {d} to {u}"))
                })
            })
            .collect::<Result<Vec<u8>>>()?;
        self.deltas[client] = delta;
        Ok(())
    }

    pub fn delta(&self, client: usize) -> &[u8] {
        &self.deltas[client]
    }
}

/// Quantizes the global weights at a client's bit-widths (its customized
/// global model).
pub fn binary_representation(global: &GlobalModel, bits: &[u8], policy: ScalePolicy) -> Result<LocalModel> {
    LocalModel::quantized(global.spec.clone(), &global.weights, global.biases.clone(), bits, policy)
}
