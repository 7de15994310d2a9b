//! im2col lowering for stride-1, unpadded convolutions on feature-major
//! batches (features × samples).

use ndarray::{Array2, ArrayView2};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub kernel: usize,
    pub in_height: usize,
    pub in_width: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (self.in_height + 1 - self.kernel, self.in_width + 1 - self.kernel)
    }

    pub fn positions(&self) -> usize {
        let (h, w) = self.out_hw();
        h * w
    }

    fn patch_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// `(C_in·k·k) × (U·P)` patch matrix; column `u·P + p` is output position
/// `p` of sample `u`.
pub(crate) fn im2col(input: ArrayView2<'_, f64>, g: ConvGeometry) -> Array2<f64> {
    let batch = input.ncols();
    let (out_h, out_w) = g.out_hw();
    let positions = out_h * out_w;
    let k = g.kernel;
    let mut cols = Array2::zeros((g.patch_rows(), batch * positions));
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for y in 0..out_h {
                    for x in 0..out_w {
                        let feature = c * g.in_height * g.in_width + (y + ky) * g.in_width + (x + kx);
                        let p = y * out_w + x;
                        for u in 0..batch {
                            cols[[row, u * positions + p]] = input[[feature, u]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto input features.
pub(crate) fn col2im(cols: ArrayView2<'_, f64>, g: ConvGeometry, batch: usize) -> Array2<f64> {
    let (out_h, out_w) = g.out_hw();
    let positions = out_h * out_w;
    let k = g.kernel;
    let mut input = Array2::zeros((g.in_channels * g.in_height * g.in_width, batch));
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for y in 0..out_h {
                    for x in 0..out_w {
                        let feature = c * g.in_height * g.in_width + (y + ky) * g.in_width + (x + kx);
                        let p = y * out_w + x;
                        for u in 0..batch {
                            input[[feature, u]] += cols[[row, u * positions + p]];
                        }
                    }
                }
            }
        }
    }
    input
}

/// `C_out × (U·P)` → `(C_out·P) × U`.
pub(crate) fn channels_to_features(z: ArrayView2<'_, f64>, positions: usize, batch: usize) -> Array2<f64> {
    let channels = z.nrows();
    Array2::from_shape_fn((channels * positions, batch), |(f, u)| {
        z[[f / positions, u * positions + f % positions]]
    })
}

/// `(C_out·P) × U` → `C_out × (U·P)`.
pub(crate) fn features_to_channels(z: ArrayView2<'_, f64>, positions: usize) -> Array2<f64> {
    let channels = z.nrows() / positions;
    let batch = z.ncols();
    Array2::from_shape_fn((channels, batch * positions), |(c, col)| {
        z[[c * positions + col % positions, col / positions]]
    })
}
