//! Sample entropy and its multiscale curve over coarse-grained series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsseConfig {
    /// Template length.
    pub m: usize,
    /// Tolerance as a fraction of the series' standard deviation.
    pub r_frac: f64,
    /// Largest coarse-graining scale.
    pub tau_max: usize,
}

impl Default for MsseConfig {
    fn default() -> Self {
        Self { m: 2, r_frac: 0.15, tau_max: 5 }
    }
}

/// Means of consecutive non-overlapping blocks of `tau` samples; a trailing
/// partial block is dropped.
pub fn coarse_grain(series: &[f64], tau: usize) -> Result<Vec<f64>> {
    if tau < 1 {
        return Err(Error::param("coarse-graining scale must be at least 1"));
    }
    if tau > series.len() {
        return Err(Error::TooShort(format!("scale {tau} exceeds series length {}", series.len())));
    }
    Ok(series.chunks_exact(tau).map(|block| block.iter().sum::<f64>() / tau as f64).collect())
}

/// Template match counts `(B, A)`: pairs `i < j` among the first `N - m`
/// templates whose `m`-prefixes (for `B`) or `(m + 1)`-prefixes (for `A`)
/// are within Chebyshev distance `r`.
fn match_counts(x: &[f64], m: usize, r: f64) -> (u64, u64) {
    let templates = x.len() - m;
    let mut b = 0u64;
    let mut a = 0u64;
    for i in 0..templates {
        for j in i + 1..templates {
            if (0..m).all(|k| (x[i + k] - x[j + k]).abs() <= r) {
                b += 1;
                if (x[i + m] - x[j + m]).abs() <= r {
                    a += 1;
                }
            }
        }
    }
    (b, a)
}

/// `-ln(A / B)`; `+inf` when no `(m + 1)`-length match exists.
pub fn sample_entropy(series: &[f64], m: usize, r: f64) -> Result<f64> {
    if series.len() <= m + 1 {
        return Err(Error::TooShort(format!(
            "sample entropy with m = {m} needs more than {} samples, got {}",
            m + 1,
            series.len()
        )));
    }
    if !(r >= 0.0) {
        return Err(Error::param(format!("tolerance must be non-negative, got {r}")));
    }
    let (b, a) = match_counts(series, m, r);
    if a == 0 {
        return Ok(f64::INFINITY);
    }
    if a == b {
        return Ok(0.0);
    }
    Ok(-(a as f64 / b as f64).ln())
}

/// Sample entropy with the undefined case replaced by its largest attainable
/// finite value, `ln` of the number of template pairs.
pub fn sample_entropy_bounded(series: &[f64], m: usize, r: f64) -> Result<f64> {
    let v = sample_entropy(series, m, r)?;
    if v.is_finite() {
        return Ok(v);
    }
    let templates = (series.len() - m) as f64;
    Ok((templates * (templates - 1.0) / 2.0).max(1.0).ln())
}

pub(crate) fn population_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn check_scales(len: usize, cfg: &MsseConfig) -> Result<()> {
    if cfg.tau_max < 1 {
        return Err(Error::param("tau_max must be at least 1"));
    }
    if len / cfg.tau_max <= cfg.m + 1 {
        return Err(Error::TooShort(format!(
            "series of length {len} is too short for scale {} with m = {}",
            cfg.tau_max, cfg.m
        )));
    }
    Ok(())
}

/// Entry `tau - 1` is the sample entropy of the scale-`tau` coarse-grained
/// series with tolerance `r_frac * std(series)`.
pub fn msse_curve(series: &[f64], cfg: &MsseConfig) -> Result<Vec<f64>> {
    check_scales(series.len(), cfg)?;
    let r = cfg.r_frac * population_std(series);
    (1..=cfg.tau_max).map(|tau| sample_entropy(&coarse_grain(series, tau)?, cfg.m, r)).collect()
}

/// Scalar complexity of a component: the mean of its MSSE curve, with
/// undefined entropies bounded (see [`sample_entropy_bounded`]).
pub fn complexity_score(series: &[f64], cfg: &MsseConfig) -> Result<f64> {
    check_scales(series.len(), cfg)?;
    let r = cfg.r_frac * population_std(series);
    let mut total = 0.0;
    for tau in 1..=cfg.tau_max {
        total += sample_entropy_bounded(&coarse_grain(series, tau)?, cfg.m, r)?;
    }
    Ok(total / cfg.tau_max as f64)
}
