use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::QuantizedLayer;
use crate::error::{Error, Result};

/// `W · A` for a bit-plane layer `W` (C×K) and activations `A` (K×U), using
/// only additions per plane followed by a power-of-two shift:
///
/// ```text
/// out[j,u] = s/(2^b-1) * ( Σ_i 2^(i-1) Σ_k B_i[j,k] A[k,u]  -  z Σ_k A[k,u] )
/// ```
pub fn shift_add_matmul(activations: ArrayView2<'_, f64>, layer: &QuantizedLayer) -> Result<Array2<f64>> {
    let (inner, batch) = activations.dim();
    if inner != layer.cols() {
        return Err(Error::shape(
            "shift_add_matmul",
            format!("activations with {} rows", layer.cols()),
            format!("{inner} rows"),
        ));
    }
    let rows = layer.rows();
    let column_sums: Array1<f64> = activations.sum_axis(Axis(0));
    let mut acc = Array2::<f64>::zeros((rows, batch));
    let mut partial = Array2::<f64>::zeros((rows, batch));

    for (bit, plane) in layer.planes().iter().enumerate() {
        partial.fill(0.0);
        let mut any = false;
        for (byte_idx, &byte) in plane.as_bytes().iter().enumerate() {
            let mut rest = byte;
            while rest != 0 {
                let offset = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                let flat = byte_idx * 8 + offset;
                let (j, k) = (flat / inner, flat % inner);
                partial.row_mut(j).scaled_add(1.0, &activations.row(k));
                any = true;
            }
        }
        if any {
            acc.scaled_add(f64::from(1u32 << bit), &partial);
        }
    }

    let z = f64::from(layer.zero_point());
    let step = layer.step();
    for mut row in acc.rows_mut() {
        row.zip_mut_with(&column_sums, |a, &c| *a = step * (*a - z * c));
    }
    Ok(acc)
}
