//! 4-bit NormalFloat quantization with double-quantized block scales.
//!
//! Values are split into blocks of `block_size`, divided by the block absmax
//! and mapped to the nearest of 16 levels placed at standard-normal
//! quantiles. The per-block absmax constants are themselves stored as 8-bit
//! codes on a grid `(offset + code) * step` per superblock of 256 blocks,
//! with `step` a power of two so that requantizing a dequantized tensor is
//! exact.

use std::sync::OnceLock;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{ensure_finite, Error, Result};

pub const SUPERBLOCK: usize = 256;
/// Index of the zero level in [`codebook`].
pub const ZERO_CODE: u8 = 7;

/// The 16 normalized levels, ascending, with `-1`, `0` and `1` exact.
///
/// Eight positive levels come from quantiles evenly spaced in probability
/// between 0.5 and a tail offset, seven negative ones likewise, plus zero.
pub fn codebook() -> &'static [f64; 16] {
    static BOOK: OnceLock<[f64; 16]> = OnceLock::new();
    BOOK.get_or_init(|| {
        let normal = Normal::standard();
        let offset = 0.5 * (1.0 / 32.0 + 1.0 / 30.0);
        let tail = 1.0 - offset;
        let quantiles = |n: usize| -> Vec<f64> {
            (0..n - 1).map(|i| normal.inverse_cdf(tail + (0.5 - tail) * i as f64 / (n - 1) as f64)).collect()
        };
        let mut levels: Vec<f64> = quantiles(9);
        levels.extend(quantiles(8).into_iter().map(|q| -q));
        levels.push(0.0);
        let top = levels.iter().copied().fold(0.0, f64::max);
        let mut book: Vec<f64> = levels.into_iter().map(|v| v / top).collect();
        book.sort_by(f64::total_cmp);
        book[0] = -1.0;
        book[15] = 1.0;
        book.try_into().expect("sixteen levels")
    })
}

/// Largest distance between adjacent codebook levels.
pub fn max_level_gap() -> f64 {
    codebook().windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

fn nearest_level(u: f64) -> u8 {
    let book = codebook();
    let pos = book.partition_point(|&l| l < u);
    if pos == 0 {
        return 0;
    }
    if pos == book.len() {
        return 15;
    }
    // Ties go to the level closer to zero.
    let (lo, hi) = (book[pos - 1], book[pos]);
    let pick_lo = if u - lo == hi - u { lo.abs() <= hi.abs() } else { u - lo < hi - u };
    if pick_lo {
        (pos - 1) as u8
    } else {
        pos as u8
    }
}

/// Second-level codes for one superblock of block scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleCodes {
    pub offset: i64,
    pub step: f64,
    pub codes: Vec<u8>,
}

impl ScaleCodes {
    fn encode(scales: &[f64]) -> Self {
        let lo = scales.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scales.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(hi.abs() * 2f64.powi(-40)).max(f64::MIN_POSITIVE);
        let step = 2f64.powi((span / 254.0).log2().ceil() as i32);
        let offset = (lo / step).floor() as i64;
        let codes = scales.iter().map(|&s| ((s / step - offset as f64).round()).clamp(0.0, 255.0) as u8).collect();
        Self { offset, step, codes }
    }

    fn decode(&self, i: usize) -> f64 {
        (self.offset + i64::from(self.codes[i])) as f64 * self.step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: (usize, usize),
    pub block_size: usize,
    /// Two 4-bit codes per byte, low nibble first.
    pub packed: Vec<u8>,
    pub scales: Vec<ScaleCodes>,
}

impl QuantizedTensor {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_blocks(&self) -> usize {
        self.len().div_ceil(self.block_size)
    }

    pub fn code(&self, i: usize) -> u8 {
        let byte = self.packed[i / 2];
        if i % 2 == 0 {
            byte & 0x0f
        } else {
            byte >> 4
        }
    }

    /// Dequantized absmax of block `b`.
    pub fn block_scale(&self, b: usize) -> f64 {
        self.scales[b / SUPERBLOCK].decode(b % SUPERBLOCK)
    }
}

/// Quantizes a matrix in row-major element order.
pub fn nf4_quantize(w: &Array2<f64>, block_size: usize) -> Result<QuantizedTensor> {
    if block_size < 1 {
        return Err(Error::param("quantization block size must be at least 1"));
    }
    if w.is_empty() {
        return Err(Error::Empty("tensor to quantize".into()));
    }
    let flat: Vec<f64> = w.iter().copied().collect();
    ensure_finite(&flat, "tensor to quantize")?;
    let absmax: Vec<f64> =
        flat.chunks(block_size).map(|b| b.iter().fold(0.0f64, |m, &v| m.max(v.abs()))).collect();
    let mut codes = Vec::with_capacity(flat.len());
    for (block, &a) in flat.chunks(block_size).zip(&absmax) {
        codes.extend(block.iter().map(|&v| if a == 0.0 { ZERO_CODE } else { nearest_level(v / a) }));
    }
    let packed = codes.chunks(2).map(|p| p[0] | (p.get(1).copied().unwrap_or(0) << 4)).collect();
    let scales = absmax.chunks(SUPERBLOCK).map(ScaleCodes::encode).collect();
    Ok(QuantizedTensor { shape: w.dim(), block_size, packed, scales })
}

pub fn nf4_dequantize(q: &QuantizedTensor) -> Array2<f64> {
    let book = codebook();
    let data: Vec<f64> =
        (0..q.len()).map(|i| book[q.code(i) as usize] * q.block_scale(i / q.block_size)).collect();
    Array2::from_shape_vec(q.shape, data).expect("shape matches element count")
}
