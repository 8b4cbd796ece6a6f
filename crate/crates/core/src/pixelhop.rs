//! Stride-1 application of a Saab filter bank over a 16x16 block.

use ndarray::{Array2, Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::image_io::{Block, BLOCK};
use crate::saab::{dot, PatchConfig, SaabFilterBank, SecondMoments};

const BLOCK_LEN: usize = BLOCK * BLOCK * 3;

/// Joint spatial/spectral responses of one block, shape `(H, W, L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTensor {
    pub values: Array3<f64>,
    pub config: PatchConfig,
}

impl ResponseTensor {
    pub fn channels(&self) -> usize {
        self.values.dim().2
    }
}

/// Response grid side for a patch size: `17 - s` for 16x16 blocks.
pub fn grid_side(config: PatchConfig) -> usize {
    BLOCK + 1 - config.size
}

/// Number of patch positions (and features per channel) in one block.
pub fn positions(config: PatchConfig) -> usize {
    grid_side(config).pow(2)
}

/// A block copied into a contiguous `(row, col, channel)` buffer.
#[derive(Clone)]
pub struct BlockBuf([f64; BLOCK_LEN]);

impl BlockBuf {
    pub fn new(pixels: ArrayView3<'_, f64>) -> Result<Self> {
        if pixels.dim() != (BLOCK, BLOCK, 3) {
            return Err(Error::Shape(format!("block shape {:?} != (16, 16, 3)", pixels.dim())));
        }
        let mut buf = [0.0; BLOCK_LEN];
        for (dst, src) in buf.iter_mut().zip(pixels.iter()) {
            *dst = *src;
        }
        Ok(BlockBuf(buf))
    }

    /// Writes the flattened patch at grid position `(i, j)` into `out`.
    #[inline]
    fn patch_into(&self, size: usize, i: usize, j: usize, out: &mut [f64]) {
        let run = size * 3;
        for dy in 0..size {
            let start = ((i + dy) * BLOCK + j) * 3;
            out[dy * run..(dy + 1) * run].copy_from_slice(&self.0[start..start + run]);
        }
    }

    pub fn patches(&self, config: PatchConfig) -> Array2<f64> {
        let side = grid_side(config);
        let l = config.dim();
        let mut out = Array2::zeros((side * side, l));
        for (n, mut row) in out.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("standard layout");
            self.patch_into(config.size, n / side, n % side, row);
        }
        out
    }

    pub fn accumulate(&self, config: PatchConfig, moments: &mut SecondMoments) {
        let side = grid_side(config);
        let mut patch = [0.0; 48];
        let patch = &mut patch[..config.dim()];
        for i in 0..side {
            for j in 0..side {
                self.patch_into(config.size, i, j, patch);
                moments.push(patch);
            }
        }
    }

    /// Responses of every kernel in `channels`, one plane per channel, each
    /// in row-major spatial order.
    pub fn channel_planes(&self, bank: &SaabFilterBank, channels: &[usize]) -> Vec<Vec<f64>> {
        let config = bank.config();
        let side = grid_side(config);
        let mut planes = vec![Vec::with_capacity(side * side); channels.len()];
        let mut patch = [0.0; 48];
        let patch = &mut patch[..config.dim()];
        for i in 0..side {
            for j in 0..side {
                self.patch_into(config.size, i, j, patch);
                for (plane, &k) in planes.iter_mut().zip(channels) {
                    plane.push(dot(bank.kernel(k), patch));
                }
            }
        }
        planes
    }
}

fn check_config(config: PatchConfig) -> Result<()> {
    if config.size == 0 || config.size > BLOCK || config.channels != 3 || config.dim() > 48 {
        return Err(Error::Shape(format!("unsupported patch configuration {config}")));
    }
    Ok(())
}

/// All `(17 - s)^2` stride-1 patches of a block, flattened in
/// `(row, col, channel)` order.
pub fn extract_patches(block: &Block, config: PatchConfig) -> Result<Array2<f64>> {
    check_config(config)?;
    Ok(BlockBuf::new(block.pixels.view())?.patches(config))
}

pub fn apply(block: &Block, bank: &SaabFilterBank) -> Result<ResponseTensor> {
    apply_view(block.pixels.view(), bank)
}

pub fn apply_view(pixels: ArrayView3<'_, f64>, bank: &SaabFilterBank) -> Result<ResponseTensor> {
    let config = bank.config();
    check_config(config)?;
    let buf = BlockBuf::new(pixels)?;
    let side = grid_side(config);
    let l = config.dim();
    let mut values = Array3::zeros((side, side, l));
    let mut patch = [0.0; 48];
    let patch = &mut patch[..l];
    for i in 0..side {
        for j in 0..side {
            buf.patch_into(config.size, i, j, patch);
            for k in 0..l {
                values[[i, j, k]] = dot(bank.kernel(k), patch);
            }
        }
    }
    Ok(ResponseTensor { values, config })
}

/// Checks that a bank was fitted for the expected patch geometry.
pub fn ensure_config(bank: &SaabFilterBank, expected: PatchConfig) -> Result<()> {
    if bank.config() != expected {
        return Err(Error::ConfigMismatch { expected: expected.to_string(), actual: bank.config().to_string() });
    }
    Ok(())
}

/// Row-major flattening of one channel's spatial plane.
pub fn channel_features(tensor: &ResponseTensor, channel: usize) -> Result<Vec<f64>> {
    let (h, w, l) = tensor.values.dim();
    if channel >= l {
        return Err(Error::Index { index: channel, len: l });
    }
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push(tensor.values[[i, j, channel]]);
        }
    }
    Ok(out)
}
