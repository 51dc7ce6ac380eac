use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// One tile's feature grid, `values: [grid_h, grid_w, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TileFeatures {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub values: Tensor,
}

impl TileFeatures {
    pub fn new(values: Tensor) -> Result<Self> {
        match *values.shape() {
            [grid_h, grid_w, channels] => Ok(Self {
                grid_h,
                grid_w,
                channels,
                values,
            }),
            _ => Err(Error::shape(format!(
                "tile features must be [h, w, c], got {:?}",
                values.shape()
            ))),
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.grid_w + col) * self.channels;
        &self.values.data()[start..start + self.channels]
    }

    /// The grid flattened to `[grid_h·grid_w, channels]` in raster order.
    pub fn tokens(&self) -> Tensor {
        self.values
            .clone()
            .reshape(&[self.grid_h * self.grid_w, self.channels])
            .expect("same element count")
    }
}

/// Source position of output slot `(row, col, k)`, or `None` for a padded slot.
fn source_index(
    in_h: usize,
    in_w: usize,
    channels: usize,
    factor: usize,
    row: usize,
    col: usize,
    k: usize,
) -> Option<usize> {
    let cell = k / channels;
    let ch = k % channels;
    let (dy, dx) = (cell / factor, cell % factor);
    let (r, c) = (row * factor + dy, col * factor + dx);
    (r < in_h && c < in_w).then(|| (r * in_w + c) * channels + ch)
}

/// Space-to-depth: every `factor × factor` block becomes one cell whose channel
/// vector concatenates the block's cells in row-major order. Grids that are
/// not a multiple of `factor` are zero-padded on the bottom and right first.
pub fn pixel_shuffle(features: &TileFeatures, factor: usize) -> Result<TileFeatures> {
    if factor == 0 {
        return Err(Error::contract("pixel shuffle factor must be >= 1"));
    }
    let (h, w, c) = (features.grid_h, features.grid_w, features.channels);
    let (oh, ow, oc) = (h.div_ceil(factor), w.div_ceil(factor), c * factor * factor);
    let src = features.values.data();
    let mut out = vec![0.0; oh * ow * oc];
    for row in 0..oh {
        for col in 0..ow {
            let base = (row * ow + col) * oc;
            for k in 0..oc {
                if let Some(i) = source_index(h, w, c, factor, row, col, k) {
                    out[base + k] = src[i];
                }
            }
        }
    }
    TileFeatures::new(Tensor::new(&[oh, ow, oc], out)?)
}

/// Gradient of [`pixel_shuffle`] with respect to its `[in_h, in_w, channels]` input.
pub fn pixel_shuffle_backward(
    grad_out: &Tensor,
    in_h: usize,
    in_w: usize,
    channels: usize,
    factor: usize,
) -> Result<Tensor> {
    let (oh, ow, oc) = (
        in_h.div_ceil(factor),
        in_w.div_ceil(factor),
        channels * factor * factor,
    );
    if grad_out.numel() != oh * ow * oc {
        return Err(Error::shape(format!(
            "shuffle gradient has {} values, expected {}",
            grad_out.numel(),
            oh * ow * oc
        )));
    }
    let g = grad_out.data();
    let mut out = vec![0.0; in_h * in_w * channels];
    for row in 0..oh {
        for col in 0..ow {
            let base = (row * ow + col) * oc;
            for k in 0..oc {
                if let Some(i) = source_index(in_h, in_w, channels, factor, row, col, k) {
                    out[i] += g[base + k];
                }
            }
        }
    }
    Tensor::new(&[in_h, in_w, channels], out)
}
