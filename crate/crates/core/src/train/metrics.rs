//! Forecast error metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Truth values with magnitude below this are left out of MAPE.
pub const MAPE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Fraction, not percent; absent when every truth value was excluded.
    pub mape: Option<f64>,
    pub mape_excluded: usize,
    pub count: usize,
}

pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!("{} predictions vs {} truth values", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("metric input".into()));
    }
    let n = pred.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = 0.0;
    let mut kept = 0usize;
    for (&p, &y) in pred.iter().zip(truth) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
        if y.abs() >= MAPE_EPS {
            pct += (e / y).abs();
            kept += 1;
        }
    }
    Ok(Metrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape: (kept > 0).then(|| pct / kept as f64),
        mape_excluded: pred.len() - kept,
        count: pred.len(),
    })
}
