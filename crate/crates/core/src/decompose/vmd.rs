//! Variational mode decomposition solved by ADMM in the Fourier domain.
//!
//! The signal is mirror-extended by half its length on each side, the
//! one-sided spectrum is split into `K` band-limited modes with Wiener-filter
//! updates around each center frequency, center frequencies move to the
//! power-weighted mean of their mode spectrum, and the multiplier enforcing
//! `sum(u_k) = f` ascends with step `tau` (`tau = 0` leaves it at zero and the
//! reconstruction becomes approximate).

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Center-frequency initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum VmdInit {
    /// All center frequencies start at 0 (scheme id 0).
    Zero,
    /// `omega_k = 0.5 k / K` (scheme id 1).
    Uniform,
}

impl TryFrom<u8> for VmdInit {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self> {
        match id {
            0 => Ok(VmdInit::Zero),
            1 => Ok(VmdInit::Uniform),
            other => Err(Error::param(format!("unknown VMD init scheme {other}"))),
        }
    }
}

impl From<VmdInit> for u8 {
    fn from(init: VmdInit) -> u8 {
        match init {
            VmdInit::Zero => 0,
            VmdInit::Uniform => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VmdConfig {
    /// Number of modes `K`.
    pub modes: usize,
    /// Bandwidth penalty.
    pub alpha: f64,
    /// Dual ascent step for the reconstruction multiplier.
    pub tau: f64,
    pub tol: f64,
    pub init: VmdInit,
    pub max_iter: usize,
}

impl Default for VmdConfig {
    fn default() -> Self {
        Self { modes: 8, alpha: 100.0, tau: 0.0, tol: 1e-7, init: VmdInit::Uniform, max_iter: 500 }
    }
}

impl VmdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes < 1 {
            return Err(Error::param("VMD needs at least one mode"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::param(format!("VMD alpha must be positive, got {}", self.alpha)));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::param(format!("VMD tau must be non-negative, got {}", self.tau)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::param(format!("VMD tol must be positive, got {}", self.tol)));
        }
        if self.max_iter < 1 {
            return Err(Error::param("VMD max_iter must be at least 1"));
        }
        Ok(())
    }
}

/// A band-limited mode and its center frequency in cycles per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub samples: Vec<f64>,
    pub center_freq: f64,
}

/// Decomposes `signal` into `cfg.modes` modes ordered by ascending center
/// frequency.
pub fn vmd(signal: &[f64], cfg: &VmdConfig) -> Result<Vec<Mode>> {
    cfg.validate()?;
    ensure_finite(signal, "VMD input")?;
    let t = signal.len();
    let k_modes = cfg.modes;
    if t < 2 * k_modes {
        return Err(Error::TooShort(format!(
            "VMD with {k_modes} modes needs at least {} samples, got {t}",
            2 * k_modes
        )));
    }

    // Mirror extension: [rev(first half), signal, rev(second half)].
    let offset = t / 2;
    let mut mirrored: Vec<Complex64> = Vec::with_capacity(2 * t);
    mirrored.extend(signal[..offset].iter().rev().map(|&v| Complex64::new(v, 0.0)));
    mirrored.extend(signal.iter().map(|&v| Complex64::new(v, 0.0)));
    mirrored.extend(signal[offset..].iter().rev().map(|&v| Complex64::new(v, 0.0)));
    let m = mirrored.len();

    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(m).process(&mut mirrored);

    // One-sided spectrum, DC through Nyquist.
    let bins = m / 2 + 1;
    let spectrum: Vec<Complex64> = mirrored[..bins].to_vec();
    let freqs: Vec<f64> = (0..bins).map(|i| i as f64 / m as f64).collect();

    let mut omega: Vec<f64> = match cfg.init {
        VmdInit::Zero => vec![0.0; k_modes],
        VmdInit::Uniform => (0..k_modes).map(|k| 0.5 / k_modes as f64 * k as f64).collect(),
    };
    let zero = Complex64::new(0.0, 0.0);
    let mut modes = vec![vec![zero; bins]; k_modes];
    let mut lambda = vec![zero; bins];
    let mut total = vec![zero; bins];

    for _ in 0..cfg.max_iter {
        total.iter_mut().for_each(|v| *v = zero);
        for u in &modes {
            for (acc, &x) in total.iter_mut().zip(u) {
                *acc += x;
            }
        }
        let mut change = 0.0;
        for k in 0..k_modes {
            let mut diff_energy = 0.0;
            let mut energy = 0.0;
            let mut weighted = 0.0;
            for i in 0..bins {
                let old = modes[k][i];
                let others = total[i] - old;
                let df = freqs[i] - omega[k];
                let new = (spectrum[i] - others - lambda[i] * 0.5) / (1.0 + cfg.alpha * df * df);
                total[i] = others + new;
                modes[k][i] = new;
                diff_energy += (new - old).norm_sqr();
                let p = new.norm_sqr();
                energy += p;
                weighted += freqs[i] * p;
            }
            if energy > 0.0 {
                omega[k] = weighted / energy;
                change += diff_energy / energy;
            }
        }
        if cfg.tau > 0.0 {
            for i in 0..bins {
                let sum: Complex64 = modes.iter().map(|u| u[i]).sum();
                lambda[i] += (sum - spectrum[i]) * cfg.tau;
            }
        }
        if change < cfg.tol {
            break;
        }
    }

    // Back to the time domain through the Hermitian completion.
    let inverse = planner.plan_fft_inverse(m);
    let mut out: Vec<Mode> = modes
        .iter()
        .zip(&omega)
        .map(|(u, &w)| {
            let mut full = vec![zero; m];
            full[0] = Complex64::new(u[0].re, 0.0);
            for i in 1..bins {
                full[i] = u[i];
                if m - i != i {
                    full[m - i] = u[i].conj();
                }
            }
            if m % 2 == 0 {
                full[m / 2] = Complex64::new(u[m / 2].re, 0.0);
            }
            inverse.process(&mut full);
            let samples = full[offset..offset + t].iter().map(|c| c.re / m as f64).collect();
            Mode { samples, center_freq: w.clamp(0.0, 0.5) }
        })
        .collect();
    out.sort_by(|a, b| a.center_freq.total_cmp(&b.center_freq));
    Ok(out)
}

/// Removes the mode with the largest center frequency and returns the sum of
/// the remaining `K - 1` modes, together with all modes.
pub fn vmd_denoise(signal: &[f64], cfg: &VmdConfig) -> Result<(Vec<f64>, Vec<Mode>)> {
    if cfg.modes < 2 {
        return Err(Error::param("denoising needs at least two VMD modes"));
    }
    let modes = vmd(signal, cfg)?;
    let denoised = sum_modes(&modes[..modes.len() - 1], signal.len());
    Ok((denoised, modes))
}

/// Sequential left-to-right sum of mode samples.
pub fn sum_modes(modes: &[Mode], len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for m in modes {
        for (a, &v) in acc.iter_mut().zip(&m.samples) {
            *a += v;
        }
    }
    acc
}
