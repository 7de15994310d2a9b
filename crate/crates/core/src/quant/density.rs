use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{quantize, QuantizedLayer, ScalePolicy};
use crate::error::{Error, Result};

/// Fraction of ones in each plane, LSB first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    pub ones: Vec<u64>,
    pub entries: u64,
}

impl DensityProfile {
    pub fn density(&self, plane: usize) -> f64 {
        if self.entries == 0 {
            return 0.0;
        }
        self.ones[plane] as f64 / self.entries as f64
    }

    pub fn densities(&self) -> Vec<f64> {
        (0..self.ones.len()).map(|i| self.density(i)).collect()
    }

    /// Density of the most significant plane.
    pub fn msb(&self) -> f64 {
        self.density(self.ones.len() - 1)
    }
}

pub fn plane_density(layer: &QuantizedLayer) -> DensityProfile {
    DensityProfile {
        ones: layer.planes().iter().map(|p| p.count_ones()).collect(),
        entries: layer.len() as u64,
    }
}

/// Drops most-significant planes while their density is at most `epsilon`,
/// never going below one bit. Surviving values are re-quantized onto the
/// narrower grid (fresh scale from `policy`, zero-point `2^(b'-1)`) after
/// removing the dropped planes' contributions.
pub fn prune_msbs(layer: &QuantizedLayer, epsilon: f64, policy: ScalePolicy) -> Result<(QuantizedLayer, u8)> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::contract("prune_msbs", format!("epsilon {epsilon} outside [0, 1]")));
    }
    let profile = plane_density(layer);
    let mut kept = layer.bit_width();
    while kept > 1 && profile.density(usize::from(kept) - 1) <= epsilon {
        kept -= 1;
    }
    if kept == layer.bit_width() {
        return Ok((layer.clone(), kept));
    }

    let mask = (1u32 << kept) - 1;
    let values: Vec<f64> = layer
        .codes()
        .into_iter()
        .map(|c| layer.value_of_code(u32::from(c) & mask))
        .collect();
    let values = Array2::from_shape_vec(layer.shape(), values).expect("shape matches code count");
    let pruned = quantize(values.view(), kept, policy)?;
    Ok((pruned, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::BitPlane;

    #[test]
    fn densities_are_popcount_ratios() {
        let zeros = QuantizedLayer::from_codes(2, 5, 1, 1.0, &[0; 10]).unwrap();
        assert_eq!(plane_density(&zeros).density(0), 0.0);
        let ones = QuantizedLayer::from_codes(2, 5, 1, 1.0, &[1; 10]).unwrap();
        assert_eq!(plane_density(&ones).density(0), 1.0);
        let three = QuantizedLayer::from_codes(2, 5, 1, 1.0, &[1, 0, 0, 1, 0, 0, 0, 0, 0, 1]).unwrap();
        assert_eq!(plane_density(&three).density(0), 0.3);
    }

    fn four_bit_figure_layer() -> QuantizedLayer {
        // 10 entries; plane 4 has one 1 (0.1), plane 3 has three (0.3),
        // planes 1 and 2 are dense.
        let lsb = BitPlane::from_bits(&[true, true, false, true, true, false, true, true, false, true]);
        let p2 = BitPlane::from_bits(&[true, false, true, true, false, true, true, false, true, true]);
        let p3 = BitPlane::from_bits(&[false, true, false, false, true, false, false, false, true, false]);
        let msb = BitPlane::from_bits(&[false, false, false, false, false, false, true, false, false, false]);
        QuantizedLayer::from_planes(2, 5, 1.5, vec![lsb, p2, p3, msb]).unwrap()
    }

    #[test]
    fn sparse_top_planes_are_pruned_from_four_to_two_bits() {
        let layer = four_bit_figure_layer();
        let (pruned, bits) = prune_msbs(&layer, 0.4, ScalePolicy::RangeCovering).unwrap();
        assert_eq!(bits, 2);
        assert_eq!(pruned.bit_width(), 2);
        assert_eq!(pruned.zero_point(), 2);
    }

    #[test]
    fn dense_msb_is_kept() {
        let layer = four_bit_figure_layer();
        let (same, bits) = prune_msbs(&layer, 0.05, ScalePolicy::RangeCovering).unwrap();
        assert_eq!(bits, 4);
        assert_eq!(same, layer);
    }

    #[test]
    fn one_bit_layers_are_never_pruned() {
        let layer = QuantizedLayer::from_codes(1, 4, 1, 1.0, &[0; 4]).unwrap();
        let (same, bits) = prune_msbs(&layer, 0.9, ScalePolicy::RangeCovering).unwrap();
        assert_eq!(bits, 1);
        assert_eq!(same, layer);
    }

    #[test]
    fn epsilon_zero_prunes_only_empty_planes() {
        // codes < 8 in a 4-bit layer: MSB plane empty, plane 3 has one 1.
        let layer = QuantizedLayer::from_codes(1, 4, 4, 1.0, &[1, 2, 7, 3]).unwrap();
        let (_, bits) = prune_msbs(&layer, 0.0, ScalePolicy::RangeCovering).unwrap();
        assert_eq!(bits, 3);
    }

    #[test]
    fn epsilon_one_saturates_to_one_bit() {
        let layer = QuantizedLayer::from_codes(1, 4, 6, 1.0, &[63, 62, 1, 40]).unwrap();
        let (pruned, bits) = prune_msbs(&layer, 1.0, ScalePolicy::RangeCovering).unwrap();
        assert_eq!(bits, 1);
        assert_eq!(pruned.bit_width(), 1);
    }

    #[test]
    fn pruning_drops_only_minority_msb_contribution() {
        // 3-bit, scale 7 (step 1, z 4). Codes 0..=3 carry no MSB and map to
        // -4..=-1; one code 5 loses its MSB and becomes code 1 (-3).
        let layer = QuantizedLayer::from_codes(1, 8, 3, 7.0, &[0, 1, 2, 3, 0, 1, 2, 5]).unwrap();
        let (pruned, bits) = prune_msbs(&layer, 0.2, ScalePolicy::RangeCovering).unwrap();
        assert_eq!(bits, 2);
        // max |v| = 4 -> range-covering 2-bit scale 4 * 3 / 2 = 6, step 2, z 2.
        assert_eq!(pruned.scale(), 6.0);
        let deq = pruned.dequantize();
        // -4 -> -4, -3 -> tie between -4 and -2 goes up to -2, -2 -> -2, -1 -> tie -> 0.
        assert_eq!(deq.row(0).to_vec(), vec![-4.0, -2.0, -2.0, 0.0, -4.0, -2.0, -2.0, -2.0]);
    }
}
