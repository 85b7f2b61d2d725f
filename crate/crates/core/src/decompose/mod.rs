//! Multi-frequency extraction.
//!
//! [`multi_frequency_pipeline`] runs the full path: VMD, removal of the mode
//! with the largest center frequency, complexity scoring of the retained
//! modes by mean multiscale sample entropy, secondary ensemble-EMD
//! decomposition of the most complex mode, and recombination of all
//! components into high, mid and low bands.

mod bands;
mod emd;
mod entropy;
mod vmd;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

pub use bands::{band_recombine, kmeans3, Band, BandSet};
pub use emd::{emd, iceemdan, ImfSet, SiftConfig};
pub use entropy::{coarse_grain, complexity_score, msse_curve, sample_entropy, sample_entropy_bounded, MsseConfig};
pub use vmd::{sum_modes, vmd, vmd_denoise, Mode, VmdConfig, VmdInit};

use crate::error::Result;
use crate::exec::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub ensemble_n: usize,
    pub noise_amp: f64,
    pub sift: SiftConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { ensemble_n: 100, noise_amp: 0.2, sift: SiftConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MultiFrequencyConfig {
    pub vmd: VmdConfig,
    pub ensemble: EnsembleConfig,
    pub msse: MsseConfig,
}

/// A named component feeding the band recombination.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub id: String,
    pub samples: Vec<f64>,
    pub complexity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionResult {
    /// All VMD modes, ascending center frequency; the last one was dropped.
    pub modes: Vec<Mode>,
    /// Mean MSSE of each retained mode.
    pub mode_complexity: Vec<f64>,
    pub denoised: Vec<f64>,
    /// Index (into `modes`) of the mode refined by the ensemble EMD.
    pub refined_mode: usize,
    pub refinement: ImfSet,
    /// Retained modes with the refined one replaced by its IMFs and residual.
    pub components: Vec<Component>,
    pub bands: BandSet,
}

/// Runs the full multi-frequency extraction on one series.
pub fn multi_frequency_pipeline(
    signal: &[f64],
    cfg: &MultiFrequencyConfig,
    seed: u64,
    exec: Execution,
) -> Result<DecompositionResult> {
    let (denoised, modes) = vmd_denoise(signal, &cfg.vmd)?;
    let retained = &modes[..modes.len() - 1];
    let mode_complexity =
        retained.iter().map(|m| complexity_score(&m.samples, &cfg.msse)).collect::<Result<Vec<_>>>()?;

    // Most complex retained mode; ties go to the lower index.
    let mut refined_mode = 0;
    for (i, &c) in mode_complexity.iter().enumerate() {
        if c > mode_complexity[refined_mode] {
            refined_mode = i;
        }
    }
    let refinement = iceemdan(
        &retained[refined_mode].samples,
        cfg.ensemble.ensemble_n,
        cfg.ensemble.noise_amp,
        seed,
        &cfg.ensemble.sift,
        exec,
    )?;

    let mut components = Vec::new();
    for (i, mode) in retained.iter().enumerate() {
        if i != refined_mode {
            components.push(Component {
                id: format!("mode{i}"),
                samples: mode.samples.clone(),
                complexity: mode_complexity[i],
            });
            continue;
        }
        for (j, imf) in refinement.imfs.iter().enumerate() {
            components.push(Component {
                id: format!("mode{i}_imf{j}"),
                samples: imf.clone(),
                complexity: complexity_score(imf, &cfg.msse)?,
            });
        }
        components.push(Component {
            id: format!("mode{i}_residual"),
            samples: refinement.residual.clone(),
            complexity: complexity_score(&refinement.residual, &cfg.msse)?,
        });
    }

    let samples: Vec<Vec<f64>> = components.iter().map(|c| c.samples.clone()).collect();
    let complexity: Vec<f64> = components.iter().map(|c| c.complexity).collect();
    let bands = band_recombine(&samples, &complexity)?;
    Ok(DecompositionResult { modes, mode_complexity, denoised, refined_mode, refinement, components, bands })
}

/// Index of the largest-magnitude non-DC bin in the one-sided spectrum.
pub fn fft_peak_bin(x: &[f64]) -> usize {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::<f64>::new().plan_fft_forward(buf.len()).process(&mut buf);
    let half = x.len() / 2;
    (1..=half).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    fn noisy_two_tone(t: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::seed::rng(seed);
        (0..t)
            .map(|i| {
                let x = i as f64;
                let z: f64 = StandardNormal.sample(&mut rng);
                2.0 * (2.0 * PI * 4.0 * x / 256.0).cos() + (2.0 * PI * 32.0 * x / 256.0).cos() + 0.1 * z
            })
            .collect()
    }

    fn cfg() -> MultiFrequencyConfig {
        MultiFrequencyConfig {
            vmd: VmdConfig { modes: 4, alpha: 2000.0, ..VmdConfig::default() },
            ensemble: EnsembleConfig { ensemble_n: 10, ..EnsembleConfig::default() },
            msse: MsseConfig::default(),
        }
    }

    #[test]
    fn pipeline_identities() {
        let x = noisy_two_tone(512, 1);
        let r = multi_frequency_pipeline(&x, &cfg(), 7, Execution::Parallel).unwrap();
        assert_eq!(r.denoised, sum_modes(&r.modes[..r.modes.len() - 1], x.len()));
        let total = r.bands.total();
        let scale = r.denoised.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in total.iter().zip(&r.denoised) {
            assert!((a - b).abs() / scale < 1e-9);
        }
        assert_eq!(r.bands.membership.len(), r.components.len());
    }

    #[test]
    fn high_band_oscillates_faster_than_low_band() {
        let x = noisy_two_tone(1024, 2);
        let r = multi_frequency_pipeline(&x, &cfg(), 3, Execution::Parallel).unwrap();
        assert!(fft_peak_bin(&r.bands.high) > fft_peak_bin(&r.bands.low));
    }

    #[test]
    fn pipeline_is_seed_deterministic_across_modes() {
        let x = noisy_two_tone(256, 4);
        let a = multi_frequency_pipeline(&x, &cfg(), 11, Execution::Parallel).unwrap();
        let b = multi_frequency_pipeline(&x, &cfg(), 11, Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }
}
