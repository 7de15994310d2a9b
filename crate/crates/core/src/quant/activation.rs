use ndarray::Array2;

use crate::error::{Error, Result};

/// Snaps a tensor onto a per-tensor uniform grid with `2^bits - 1` steps
/// between zero and its largest magnitude. Non-negative tensors land on the
/// unsigned grid `{0, m/(2^bits-1), ..., m}`; negative entries mirror it.
/// Ties round away from zero.
pub fn quantize_activations(tensor: &Array2<f64>, bits: u8) -> Result<Array2<f64>> {
    if !(1..=8).contains(&bits) {
        return Err(Error::contract("quantize_activations", format!("bits {bits} outside [1, 8]")));
    }
    let max_abs = tensor.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 || !max_abs.is_finite() {
        return Ok(tensor.clone());
    }
    let top = f64::from((1u32 << bits) - 1);
    Ok(tensor.mapv(|v| {
        let level = (v.abs() / max_abs * top + 0.5).floor().min(top);
        (level * max_abs / top).copysign(v)
    }))
}
