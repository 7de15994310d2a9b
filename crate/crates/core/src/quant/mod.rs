//! Bit-plane fixed-point layers.
//!
//! A layer with bit-width `b` stores an integer code `c ∈ [0, 2^b - 1]` per
//! parameter, split into `b` binary planes (plane 0 is the LSB). The real
//! value of a code is
//!
//! ```text
//! w = s / (2^b - 1) * (c - z),    z = 2^(b-1)
//! ```
//!
//! so the representable range is `[-s z / (2^b - 1), s (2^b - 1 - z) / (2^b - 1)]`.

mod activation;
mod density;
mod planes;
mod shift_add;

pub use activation::quantize_activations;
pub use density::{plane_density, prune_msbs, DensityProfile};
pub use planes::{packed_len, BitPlane};
pub use shift_add::shift_add_matmul;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 8;

/// How the per-layer scale is derived from the weights being quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalePolicy {
    /// `s = max |w|`. The representable range is then roughly `[-s/2, s/2]`
    /// and larger weights are clipped.
    PaperLiteral,
    /// `s = max |w| * (2^b - 1) / 2^(b-1)`, which puts the minimum
    /// representable value at exactly `-max |w|`.
    #[default]
    RangeCovering,
}

impl ScalePolicy {
    /// Scale for weights whose largest magnitude is `max_abs`. An all-zero
    /// layer gets scale 1.
    pub fn scale_for(self, max_abs: f64, bit_width: u8) -> f64 {
        if max_abs == 0.0 {
            return 1.0;
        }
        match self {
            ScalePolicy::PaperLiteral => max_abs,
            ScalePolicy::RangeCovering => {
                max_abs * levels(bit_width) as f64 / zero_point(bit_width) as f64
            }
        }
    }
}

/// `2^b - 1`, the largest code.
#[inline]
pub fn levels(bit_width: u8) -> u32 {
    (1u32 << bit_width) - 1
}

#[inline]
pub fn zero_point(bit_width: u8) -> u32 {
    1u32 << (bit_width - 1)
}

pub fn check_bit_width(op: &'static str, bit_width: u8) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bit_width) {
        Ok(())
    } else {
        Err(Error::contract(
            op,
            format!("bit width {bit_width} outside [{MIN_BITS}, {MAX_BITS}]"),
        ))
    }
}

/// One layer's parameters in bit-plane form. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    rows: usize,
    cols: usize,
    scale: f64,
    planes: Vec<BitPlane>,
}

impl QuantizedLayer {
    pub fn from_codes(
        rows: usize,
        cols: usize,
        bit_width: u8,
        scale: f64,
        codes: &[u8],
    ) -> Result<Self> {
        const OP: &str = "QuantizedLayer::from_codes";
        check_bit_width(OP, bit_width)?;
        if codes.len() != rows * cols {
            return Err(Error::shape(OP, rows * cols, codes.len()));
        }
        check_scale(OP, scale)?;
        let max = levels(bit_width);
        if let Some(bad) = codes.iter().find(|&&c| u32::from(c) > max) {
            return Err(Error::contract(
                OP,
                format!("code {bad} exceeds {max} for {bit_width}-bit layer"),
            ));
        }
        let planes = (0..u32::from(bit_width))
            .map(|bit| BitPlane::from_code_bit(codes, bit))
            .collect();
        Ok(QuantizedLayer {
            rows,
            cols,
            scale,
            planes,
        })
    }

    /// Assembles a layer from planes ordered LSB first.
    pub fn from_planes(rows: usize, cols: usize, scale: f64, planes: Vec<BitPlane>) -> Result<Self> {
        const OP: &str = "QuantizedLayer::from_planes";
        let bit_width = u8::try_from(planes.len()).unwrap_or(u8::MAX);
        check_bit_width(OP, bit_width)?;
        check_scale(OP, scale)?;
        if let Some(p) = planes.iter().find(|p| p.len() != rows * cols) {
            return Err(Error::shape(OP, rows * cols, p.len()));
        }
        Ok(QuantizedLayer {
            rows,
            cols,
            scale,
            planes,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bit_width(&self) -> u8 {
        self.planes.len() as u8
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> u32 {
        zero_point(self.bit_width())
    }

    pub fn levels(&self) -> u32 {
        levels(self.bit_width())
    }

    /// Planes ordered LSB first.
    pub fn planes(&self) -> &[BitPlane] {
        &self.planes
    }

    /// Distance between adjacent representable values, `s / (2^b - 1)`.
    pub fn step(&self) -> f64 {
        self.scale / f64::from(self.levels())
    }

    pub fn min_value(&self) -> f64 {
        self.value_of_code(0)
    }

    pub fn max_value(&self) -> f64 {
        self.value_of_code(self.levels())
    }

    #[inline]
    pub fn value_of_code(&self, code: u32) -> f64 {
        self.scale / f64::from(self.levels()) * (f64::from(code) - f64::from(self.zero_point()))
    }

    pub fn code(&self, k: usize) -> u8 {
        self.planes
            .iter()
            .enumerate()
            .fold(0u8, |acc, (bit, plane)| acc | (u8::from(plane.get(k)) << bit))
    }

    pub fn codes(&self) -> Vec<u8> {
        let mut codes = vec![0u8; self.len()];
        for (bit, plane) in self.planes.iter().enumerate() {
            for (byte_idx, &byte) in plane.as_bytes().iter().enumerate() {
                if byte == 0 {
                    continue;
                }
                let base = byte_idx * 8;
                for offset in 0..8 {
                    if (byte >> offset) & 1 == 1 {
                        codes[base + offset] |= 1 << bit;
                    }
                }
            }
        }
        codes
    }

    pub fn dequantize(&self) -> Array2<f64> {
        let values = self
            .codes()
            .into_iter()
            .map(|c| self.value_of_code(u32::from(c)))
            .collect();
        Array2::from_shape_vec((self.rows, self.cols), values).expect("shape matches code count")
    }

    /// Same layer with new codes; scale and bit-width unchanged.
    pub fn with_codes(&self, codes: &[u8]) -> Result<Self> {
        QuantizedLayer::from_codes(self.rows, self.cols, self.bit_width(), self.scale, codes)
    }
}

fn check_scale(op: &'static str, scale: f64) -> Result<()> {
    if scale.is_finite() && scale > 0.0 {
        Ok(())
    } else {
        Err(Error::contract(op, format!("scale must be finite and positive, got {scale}")))
    }
}

pub fn dequantize(layer: &QuantizedLayer) -> Array2<f64> {
    layer.dequantize()
}

/// Clips each weight to the layer's representable range and maps it to the
/// nearest code, ties going to the larger code.
pub fn quantize(weights: ArrayView2<'_, f64>, bit_width: u8, policy: ScalePolicy) -> Result<QuantizedLayer> {
    const OP: &str = "quantize";
    check_bit_width(OP, bit_width)?;
    if let Some(bad) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::contract(OP, format!("non-finite weight {bad}")));
    }
    let max_abs = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    let scale = policy.scale_for(max_abs, bit_width);
    let codes: Vec<u8> = weights
        .iter()
        .map(|&w| code_for(w, scale, bit_width))
        .collect();
    let (rows, cols) = weights.dim();
    QuantizedLayer::from_codes(rows, cols, bit_width, scale, &codes)
}

/// Nearest code for `w` on the grid defined by `scale` and `bit_width`.
pub fn code_for(w: f64, scale: f64, bit_width: u8) -> u8 {
    let top = f64::from(levels(bit_width));
    let z = f64::from(zero_point(bit_width));
    let step = scale / top;
    let x = (w / step + z).clamp(0.0, top);
    (x + 0.5).floor().min(top) as u8
}
