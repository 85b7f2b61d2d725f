//! Empirical mode decomposition by envelope sifting, and its noise-assisted
//! ensemble.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::exec::Execution;
use crate::seed;

/// Sifting stop rule and IMF cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiftConfig {
    /// Stop sifting once the normalized squared change between successive
    /// sifts falls below this value.
    pub sd_threshold: f64,
    pub max_sifts: usize,
    pub max_imfs: usize,
}

impl Default for SiftConfig {
    fn default() -> Self {
        Self { sd_threshold: 0.2, max_sifts: 10, max_imfs: 10 }
    }
}

/// IMFs and the remainder. `sum(imfs) + residual` reconstructs the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ImfSet {
    pub imfs: Vec<Vec<f64>>,
    pub residual: Vec<f64>,
}

impl ImfSet {
    /// Builds the set from IMFs, defining the residual as the remainder.
    fn from_imfs(signal: &[f64], imfs: Vec<Vec<f64>>) -> Self {
        let mut residual = signal.to_vec();
        for imf in &imfs {
            for (r, v) in residual.iter_mut().zip(imf) {
                *r -= v;
            }
        }
        Self { imfs, residual }
    }

    /// `sum(imfs) + residual`, accumulated left to right.
    pub fn reconstruct(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.residual.len()];
        for imf in &self.imfs {
            for (a, v) in acc.iter_mut().zip(imf) {
                *a += v;
            }
        }
        for (a, v) in acc.iter_mut().zip(&self.residual) {
            *a += v;
        }
        acc
    }
}

/// Indices of local maxima and minima. Flat runs count once, at their middle.
pub(crate) fn extrema(x: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut maxima = Vec::new();
    let mut minima = Vec::new();
    let n = x.len();
    if n < 3 {
        return (maxima, minima);
    }
    // Direction of the last strict move, and where the current flat run began.
    let mut last_dir = 0i8;
    let mut run_start = 0usize;
    for i in 1..n {
        let d = x[i] - x[i - 1];
        let dir = if d > 0.0 {
            1
        } else if d < 0.0 {
            -1
        } else {
            0
        };
        if dir == 0 {
            continue;
        }
        if last_dir == 1 && dir == -1 {
            maxima.push((run_start + i - 1) / 2);
        } else if last_dir == -1 && dir == 1 {
            minima.push((run_start + i - 1) / 2);
        }
        last_dir = dir;
        run_start = i;
    }
    (maxima, minima)
}

/// Natural cubic spline through `(xs, ys)` evaluated at `0..len`.
fn natural_spline(xs: &[f64], ys: &[f64], len: usize) -> Vec<f64> {
    let n = xs.len();
    debug_assert!(n >= 2);
    if n == 2 {
        let slope = (ys[1] - ys[0]) / (xs[1] - xs[0]);
        return (0..len).map(|t| ys[0] + slope * (t as f64 - xs[0])).collect();
    }
    // Second derivatives via the tridiagonal system with M_0 = M_{n-1} = 0.
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut sub = vec![0.0; n];
    let mut sup = vec![0.0; n];
    diag[0] = 1.0;
    diag[n - 1] = 1.0;
    for i in 1..n - 1 {
        sub[i] = h[i - 1];
        diag[i] = 2.0 * (h[i - 1] + h[i]);
        sup[i] = h[i];
        rhs[i] = 6.0 * ((ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1]);
    }
    // Thomas algorithm.
    for i in 1..n {
        let w = sub[i] / diag[i - 1];
        diag[i] -= w * sup[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    let mut m2 = vec![0.0; n];
    m2[n - 1] = rhs[n - 1] / diag[n - 1];
    for i in (0..n - 1).rev() {
        m2[i] = (rhs[i] - sup[i] * m2[i + 1]) / diag[i];
    }

    let mut out = Vec::with_capacity(len);
    let mut seg = 0usize;
    for t in 0..len {
        let x = t as f64;
        while seg + 2 < n && x > xs[seg + 1] {
            seg += 1;
        }
        let (x0, x1) = (xs[seg], xs[seg + 1]);
        let hh = x1 - x0;
        let a = (x1 - x) / hh;
        let b = (x - x0) / hh;
        let v = a * ys[seg]
            + b * ys[seg + 1]
            + ((a * a * a - a) * m2[seg] + (b * b * b - b) * m2[seg + 1]) * hh * hh / 6.0;
        out.push(v);
    }
    out
}

/// Envelope through the given extrema, mirrored about both end samples so
/// the spline covers the whole support.
fn envelope(x: &[f64], idx: &[usize]) -> Vec<f64> {
    let n = x.len();
    let last = (n - 1) as f64;
    let mirror = idx.len().min(2);
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(idx.len() + 2 * mirror);
    for &i in idx[..mirror].iter().rev() {
        pts.push((-(i as f64), x[i]));
    }
    for &i in idx {
        pts.push((i as f64, x[i]));
    }
    for &i in idx[idx.len() - mirror..].iter().rev() {
        pts.push((2.0 * last - i as f64, x[i]));
    }
    // An extremum sitting on an end sample mirrors onto itself.
    pts.dedup_by(|a, b| a.0 == b.0);
    let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    natural_spline(&xs, &ys, n)
}

fn has_oscillation(x: &[f64]) -> bool {
    let (maxima, minima) = extrema(x);
    !maxima.is_empty() && !minima.is_empty() && maxima.len() + minima.len() >= 4
}

fn sift(x: &[f64], cfg: &SiftConfig) -> Vec<f64> {
    let mut h = x.to_vec();
    for _ in 0..cfg.max_sifts {
        let (maxima, minima) = extrema(&h);
        if maxima.is_empty() || minima.is_empty() || maxima.len() + minima.len() < 4 {
            break;
        }
        let upper = envelope(&h, &maxima);
        let lower = envelope(&h, &minima);
        let mut num = 0.0;
        let mut den = 0.0;
        let next: Vec<f64> = h
            .iter()
            .zip(upper.iter().zip(&lower))
            .map(|(&v, (&u, &l))| {
                let mean = 0.5 * (u + l);
                num += mean * mean;
                den += v * v;
                v - mean
            })
            .collect();
        h = next;
        if den == 0.0 || num / den < cfg.sd_threshold {
            break;
        }
    }
    h
}

/// Standard EMD. A signal with fewer than four extrema comes back whole as
/// the residual with no IMFs.
pub fn emd(signal: &[f64], cfg: &SiftConfig) -> Result<ImfSet> {
    ensure_finite(signal, "EMD input")?;
    let scale = signal.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut imfs = Vec::new();
    let mut rest = signal.to_vec();
    while imfs.len() < cfg.max_imfs && has_oscillation(&rest) {
        let imf = sift(&rest, cfg);
        if imf.iter().all(|v| v.abs() <= 1e-14 * scale) {
            break;
        }
        for (r, v) in rest.iter_mut().zip(&imf) {
            *r -= v;
        }
        imfs.push(imf);
    }
    Ok(ImfSet::from_imfs(signal, imfs))
}

fn std_dev(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Noise-assisted ensemble EMD: each of `ensemble_n` members decomposes the
/// signal plus seeded white noise of standard deviation
/// `noise_amp * std(signal)`; IMF `i` is the member average of IMF `i`
/// (members with fewer IMFs contribute zeros), and the residual is the
/// remainder. Member `n` draws from its own sub-seed, so the result does not
/// depend on the execution mode.
pub fn iceemdan(
    signal: &[f64],
    ensemble_n: usize,
    noise_amp: f64,
    seed: u64,
    cfg: &SiftConfig,
    exec: Execution,
) -> Result<ImfSet> {
    if ensemble_n < 1 {
        return Err(Error::param("ensemble size must be at least 1"));
    }
    if !(noise_amp >= 0.0 && noise_amp.is_finite()) {
        return Err(Error::param(format!("noise amplitude must be non-negative, got {noise_amp}")));
    }
    ensure_finite(signal, "ICEEMDAN input")?;
    let sigma = noise_amp * std_dev(signal);
    if sigma == 0.0 {
        return emd(signal, cfg);
    }
    let members = exec.try_map(ensemble_n, |n| {
        let mut rng = seed::rng(seed::indexed_sub_seed(seed, seed::DECOMPOSE_NOISE, n as u64));
        let noisy: Vec<f64> = signal
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + sigma * z
            })
            .collect();
        emd(&noisy, cfg).map(|set| set.imfs)
    })?;
    let count = members.iter().map(Vec::len).max().unwrap_or(0);
    let len = signal.len();
    let mut imfs = vec![vec![0.0; len]; count];
    for member in &members {
        for (acc, imf) in imfs.iter_mut().zip(member) {
            for (a, v) in acc.iter_mut().zip(imf) {
                *a += v;
            }
        }
    }
    let inv = 1.0 / ensemble_n as f64;
    for imf in &mut imfs {
        imf.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(ImfSet::from_imfs(signal, imfs))
}
