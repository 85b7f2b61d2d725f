//! Time-domain and frequency-domain losses with their gradients.

use ndarray::{Array2, Array3, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the frequency term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::param(format!("loss.lambda must be finite and non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn check_shapes(pred: &Array3<f64>, truth: &Array3<f64>) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("loss input".into()));
    }
    Ok(())
}

/// `(S, N, 1)` to `(N, S)`: one horizon sequence per row.
fn node_rows(x: &Array3<f64>) -> Array2<f64> {
    x.index_axis(Axis(2), 0).t().to_owned()
}

pub fn dft(x: &[f64]) -> Result<Vec<Complex<f64>>> {
    if x.is_empty() {
        return Err(Error::Empty("transform input".into()));
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    Ok(buf)
}

pub fn mae_loss(pred: &Array3<f64>, truth: &Array3<f64>) -> Result<f64> {
    check_shapes(pred, truth)?;
    Ok(mae_rows(&node_rows(pred), &node_rows(truth)).0)
}

pub fn frequency_loss(pred: &Array3<f64>, truth: &Array3<f64>) -> Result<f64> {
    check_shapes(pred, truth)?;
    Ok(frequency_rows(&node_rows(pred), &node_rows(truth)).0)
}

pub fn combined_loss(pred: &Array3<f64>, truth: &Array3<f64>, cfg: &LossConfig) -> Result<f64> {
    check_shapes(pred, truth)?;
    Ok(combined_rows(&node_rows(pred), &node_rows(truth), cfg.lambda).0)
}

/// Mean absolute error over all entries and its gradient.
pub fn mae_rows(pred: &Array2<f64>, truth: &Array2<f64>) -> (f64, Array2<f64>) {
    let m = pred.len() as f64;
    let err = pred - truth;
    let loss = err.iter().map(|e| e.abs()).sum::<f64>() / m;
    let grad = err.mapv(|e| if e > 0.0 { 1.0 / m } else if e < 0.0 { -1.0 / m } else { 0.0 });
    (loss, grad)
}

/// Mean over rows and bins of `|DFT(pred_row - truth_row)|` and its gradient.
/// Bins with zero modulus contribute a zero subgradient.
pub fn frequency_rows(pred: &Array2<f64>, truth: &Array2<f64>) -> (f64, Array2<f64>) {
    let (rows, len) = pred.dim();
    let norm = (rows * len) as f64;
    let fft = FftPlanner::new().plan_fft_forward(len);
    let mut loss = 0.0;
    let mut grad = Array2::zeros((rows, len));
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for r in 0..rows {
        for (b, (p, t)) in buf.iter_mut().zip(pred.row(r).iter().zip(truth.row(r))) {
            *b = Complex::new(p - t, 0.0);
        }
        fft.process(&mut buf);
        for z in buf.iter_mut() {
            let modulus = z.norm();
            loss += modulus;
            *z = if modulus > 0.0 { z.conj() / modulus } else { Complex::new(0.0, 0.0) };
        }
        // d|Z_k|/de_t = Re(conj(Z_k)/|Z_k| * exp(-2 pi i k t / S)), a forward transform of the unit phasors.
        fft.process(&mut buf);
        for (g, z) in grad.row_mut(r).iter_mut().zip(&buf) {
            *g = z.re / norm;
        }
    }
    (loss / norm, grad)
}

/// `MAE + lambda * frequency` with gradient; the frequency term is skipped
/// entirely when `lambda == 0`.
pub fn combined_rows(pred: &Array2<f64>, truth: &Array2<f64>, lambda: f64) -> (f64, Array2<f64>) {
    let (mae, mut grad) = mae_rows(pred, truth);
    if lambda == 0.0 {
        return (mae, grad);
    }
    let (freq, fgrad) = frequency_rows(pred, truth);
    grad.scaled_add(lambda, &fgrad);
    (mae + lambda * freq, grad)
}
