use ndarray::Array2;
use proptest::prelude::*;

use fedmpq::checkpoint::{decode, encode};
use fedmpq::quant::{code_for, plane_density, prune_msbs, quantize, shift_add_matmul, QuantizedLayer, ScalePolicy};
use fedmpq::server::{pruning_growing, round_bitwidths, Adjustment};

fn policy() -> impl Strategy<Value = ScalePolicy> {
    prop_oneof![Just(ScalePolicy::PaperLiteral), Just(ScalePolicy::RangeCovering)]
}

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Array2<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
    })
}

fn layer() -> impl Strategy<Value = QuantizedLayer> {
    (matrix(6, 9), 1..=8u8, policy()).prop_map(|(w, b, p)| quantize(w.view(), b, p).unwrap())
}

proptest! {
    #[test]
    fn codes_survive_plane_packing(layer in layer()) {
        let codes = layer.codes();
        let rebuilt = QuantizedLayer::from_codes(layer.rows(), layer.cols(), layer.bit_width(), layer.scale(), &codes).unwrap();
        prop_assert_eq!(rebuilt, layer.clone());
        prop_assert!(codes.iter().all(|&c| u32::from(c) <= layer.levels()));
    }

    #[test]
    fn grid_values_map_back_to_their_codes(w in matrix(6, 9), bits in 1..=8u8) {
        let layer = quantize(w.view(), bits, ScalePolicy::RangeCovering).unwrap();
        let again: Vec<u8> = layer.dequantize().iter().map(|&v| code_for(v, layer.scale(), bits)).collect();
        prop_assert_eq!(again, layer.codes());
    }

    #[test]
    fn shift_add_matches_dense(layer in layer(), units in 1..5usize, seed in any::<u64>()) {
        let x = Array2::from_shape_fn((layer.cols(), units), |(i, j)| ((seed ^ (i * 31 + j) as u64) % 17) as f64 - 8.0);
        let fast = shift_add_matmul(x.view(), &layer).unwrap();
        let dense = layer.dequantize().dot(&x);
        for (a, b) in fast.iter().zip(&dense) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn pruning_never_widens_and_is_monotone_in_epsilon(layer in layer(), lo in 0.0f64..0.5, gap in 0.0f64..0.5) {
        let (a, bits_a) = prune_msbs(&layer, lo, ScalePolicy::RangeCovering).unwrap();
        let (_, bits_b) = prune_msbs(&layer, lo + gap, ScalePolicy::RangeCovering).unwrap();
        prop_assert!(bits_a <= layer.bit_width());
        prop_assert!(bits_b <= bits_a);
        prop_assert_eq!(a.bit_width(), bits_a);
        if bits_a > 1 {
            prop_assert!(plane_density(&a).msb() > lo || a.bit_width() < layer.bit_width());
        }
    }

    #[test]
    fn checkpoint_round_trip(layers in prop::collection::vec(layer(), 1..5)) {
        let bytes = encode(&layers).unwrap();
        let decoded = decode(&bytes).unwrap();
        prop_assert_eq!(&decoded, &layers);
        prop_assert_eq!(encode(&decoded).unwrap(), bytes);
    }

    #[test]
    fn pruning_growing_postconditions(
        setup in (1..7usize).prop_flat_map(|n| (
            prop::collection::vec(1..=8u8, n),
            prop::collection::vec(0..=3u8, n),
            prop::collection::vec(1..2000u64, n),
        )),
        budget in 1..=8u8,
    ) {
        let (bits, delta, params) = setup;
        let budget = f64::from(budget);
        let out = pruning_growing(&bits, &delta, &params, budget).unwrap();
        prop_assert!(out.bits.iter().all(|b| (1..=8).contains(b)));
        let total = params.iter().sum::<u64>() as f64;
        let max_share = params.iter().map(|&m| m as f64 / total).fold(0.0, f64::max);
        match out.adjustment {
            Adjustment::Pruned => prop_assert!(out.average <= budget + 1e-9),
            Adjustment::Grown => prop_assert!(out.average < budget + max_share),
            Adjustment::Unchanged => prop_assert!((out.average - budget).abs() < 1e-9),
        }
        prop_assert_eq!(pruning_growing(&bits, &delta, &params, budget).unwrap(), out.clone());
        if (out.average - budget).abs() < 1e-9 {
            let twice = pruning_growing(&out.bits, &delta, &params, budget).unwrap();
            prop_assert_eq!(twice.bits, out.bits);
        }
    }

    #[test]
    fn rounding_stays_in_range(bits in prop::collection::vec(-3.0f64..12.0, 1..8)) {
        prop_assert!(round_bitwidths(&bits).iter().all(|b| (1..=8).contains(b)));
    }
}
