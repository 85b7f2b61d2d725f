//! Forecasting toolkit for station-level EV charging series.
//!
//! The crate is organized along the processing flow:
//!
//! - [`domain`]: series tensors, station graphs, calendars, splits and windows.
//! - [`decompose`]: VMD denoising, noise-assisted EMD ensembles, multiscale
//!   sample entropy and high/mid/low band recombination.
//! - [`granulate`]: triangular fuzzy information granules at coarse scales.
//! - [`select`]: ReliefF feature weighting and the holiday indicator.
//! - [`stllm`]: the partially frozen graph-attention forecaster with NF4
//!   quantized bases and low-rank adapters.
//! - [`train`]: time/frequency losses, metrics, optimizers, fitting and
//!   evaluation.
//!
//! Data-parallel loops (ensemble members, per-station work, mini-batch
//! gradients) go through [`exec`], which runs on rayon when the `parallel`
//! feature is enabled and falls back to plain iteration otherwise. Results
//! never depend on the schedule.

pub mod decompose;
pub mod domain;
pub mod error;
pub mod exec;
pub mod granulate;
pub mod seed;
pub mod select;
pub mod stllm;
pub mod train;

pub use error::{Error, Result};
pub use exec::Execution;
