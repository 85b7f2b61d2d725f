//! Fuzzy information granulation over non-overlapping windows.
//!
//! Each window is summarized by a triangular fuzzy set `(a, m, b)`. The
//! default fit takes the window minimum, median and maximum; a fuzzy c-means
//! fit is available as an alternative backend.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Triangular fuzzy set with support `[a, b]` and core `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Granule {
    pub a: f64,
    pub m: f64,
    pub b: f64,
}

impl Granule {
    pub fn new(a: f64, m: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && m.is_finite() && b.is_finite()) {
            return Err(Error::NonFinite("granule parameters".into()));
        }
        if !(a <= m && m <= b) {
            return Err(Error::param(format!("granule needs a <= m <= b, got ({a}, {m}, {b})")));
        }
        Ok(Self { a, m, b })
    }
}

/// Triangular membership. A collapsed ramp (`a == m` or `m == b`) is a step
/// that evaluates to 1 at `x == m`.
pub fn membership(x: f64, g: &Granule) -> f64 {
    if x < g.a || x > g.b {
        0.0
    } else if x <= g.m {
        if g.m == g.a {
            if x == g.m {
                1.0
            } else {
                0.0
            }
        } else {
            (x - g.a) / (g.m - g.a)
        }
    } else if g.b == g.m {
        0.0
    } else {
        (g.b - x) / (g.b - g.m)
    }
}

/// How granule parameters are fitted to a window.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum GranuleFit {
    /// `(min, median, max)` of the window.
    #[default]
    MinMedianMax,
    /// One-dimensional fuzzy c-means over the window samples: the support is
    /// spanned by the outermost cluster centers and the core is the center
    /// carrying the largest membership mass.
    FuzzyCMeans { clusters: usize, fuzziness: f64, tolerance: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GranuleSeries {
    pub window: usize,
    pub granules: Vec<Granule>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn min_median_max(window: &[f64]) -> Granule {
    let mut sorted = window.to_vec();
    sorted.sort_by(f64::total_cmp);
    Granule { a: sorted[0], m: median(&sorted), b: sorted[sorted.len() - 1] }
}

fn fuzzy_cmeans(window: &[f64], clusters: usize, fuzziness: f64, tolerance: f64) -> Granule {
    let lo = window.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo || clusters == 1 {
        let g = min_median_max(window);
        return if clusters == 1 { g } else { Granule { a: lo, m: lo, b: lo } };
    }
    let c = clusters;
    let mut centers: Vec<f64> = (0..c).map(|k| lo + (hi - lo) * k as f64 / (c - 1) as f64).collect();
    let exponent = 2.0 / (fuzziness - 1.0);
    let mut u = vec![vec![0.0; c]; window.len()];
    for _ in 0..300 {
        for (row, &x) in u.iter_mut().zip(window) {
            let d: Vec<f64> = centers.iter().map(|&v| (x - v).abs()).collect();
            if let Some(hit) = d.iter().position(|&di| di == 0.0) {
                row.iter_mut().enumerate().for_each(|(k, w)| *w = if k == hit { 1.0 } else { 0.0 });
                continue;
            }
            for k in 0..c {
                let s: f64 = d.iter().map(|&dj| (d[k] / dj).powf(exponent)).sum();
                row[k] = 1.0 / s;
            }
        }
        let mut shift = 0.0f64;
        for (k, center) in centers.iter_mut().enumerate() {
            let (num, den) = u.iter().zip(window).fold((0.0, 0.0), |(n, d), (row, &x)| {
                let w = row[k].powf(fuzziness);
                (n + w * x, d + w)
            });
            let next = num / den;
            shift = shift.max((next - *center).abs());
            *center = next;
        }
        if shift < tolerance {
            break;
        }
    }
    let mass: Vec<f64> = (0..c).map(|k| u.iter().map(|row| row[k]).sum()).collect();
    let core = (0..c).max_by(|&i, &j| mass[i].total_cmp(&mass[j]).then(j.cmp(&i))).unwrap_or(0);
    let a = centers.iter().copied().fold(f64::INFINITY, f64::min);
    let b = centers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Granule { a, m: centers[core].clamp(a, b), b }
}

/// Granulates `series` into `floor(T / window)` granules with the default
/// min/median/max fit; a trailing partial window is dropped.
pub fn fig_granulate(series: &[f64], window: usize) -> Result<GranuleSeries> {
    fig_granulate_with(series, window, &GranuleFit::MinMedianMax)
}

pub fn fig_granulate_with(series: &[f64], window: usize, fit: &GranuleFit) -> Result<GranuleSeries> {
    if window < 1 {
        return Err(Error::param("granulation window must be at least 1"));
    }
    if window > series.len() {
        return Err(Error::TooShort(format!("window {window} exceeds series length {}", series.len())));
    }
    ensure_finite(series, "granulation input")?;
    if let GranuleFit::FuzzyCMeans { clusters, fuzziness, tolerance } = *fit {
        if clusters < 1 || !(fuzziness > 1.0) || !(tolerance > 0.0) {
            return Err(Error::param("fuzzy c-means needs clusters >= 1, fuzziness > 1, tolerance > 0"));
        }
    }
    let granules = series
        .chunks_exact(window)
        .map(|w| match *fit {
            GranuleFit::MinMedianMax => min_median_max(w),
            GranuleFit::FuzzyCMeans { clusters, fuzziness, tolerance } => {
                fuzzy_cmeans(w, clusters, fuzziness, tolerance)
            }
        })
        .collect();
    Ok(GranuleSeries { window, granules })
}

/// Step-hold upsampling of granule cores back to `len` steps, one channel per
/// window size. Steps after the last full window hold the last core.
pub fn granule_channels(series: &[f64], windows: &[usize], len: usize, fit: &GranuleFit) -> Result<Vec<Vec<f64>>> {
    windows
        .iter()
        .map(|&w| {
            let gs = fig_granulate_with(series, w, fit)?;
            let last = gs.granules.len() - 1;
            Ok((0..len).map(|t| gs.granules[(t / w).min(last)].m).collect())
        })
        .collect()
}
