//! Pipeline configuration: a sectioned TOML file whose defaults are the
//! published hyperparameters, overridden by command-line flags.

use std::path::{Path, PathBuf};

use evstllm_core::decompose::{EnsembleConfig, MsseConfig, MultiFrequencyConfig, VmdConfig};
use evstllm_core::granulate::GranuleFit;
use evstllm_core::stllm::{FreezeMode, ModelConfig};
use evstllm_core::train::{LossConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SeriesKind {
    /// Energy delivered per hour.
    #[default]
    Volume,
    /// Fraction of piles in use, expected in [0, 1].
    Occupancy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub series: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    /// One ISO date per row under a `date` header.
    pub holidays: Option<PathBuf>,
    pub exogenous: Vec<PathBuf>,
    /// Two-column CSV `column,station` renaming raw headers to station ids.
    pub column_map: Option<PathBuf>,
    /// Pretrained backbone used by `train`; pretrained in-process when absent.
    pub backbone: Option<PathBuf>,
    /// Trained model read by `evaluate` and `forecast`.
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            series: None,
            adjacency: None,
            holidays: None,
            exogenous: Vec::new(),
            column_map: None,
            backbone: None,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: SeriesKind,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { kind: SeriesKind::Volume, split: [0.8, 0.1, 0.1] }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FigBackend {
    #[default]
    MinMedianMax,
    FuzzyCMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FigConfig {
    /// Granule widths in steps.
    pub windows: Vec<usize>,
    pub backend: FigBackend,
    pub clusters: usize,
    pub fuzziness: f64,
    pub tolerance: f64,
}

impl Default for FigConfig {
    fn default() -> Self {
        Self { windows: vec![24, 168], backend: FigBackend::MinMedianMax, clusters: 5, fuzziness: 2.0, tolerance: 1e-5 }
    }
}

impl FigConfig {
    pub fn fit(&self) -> GranuleFit {
        match self.backend {
            FigBackend::MinMedianMax => GranuleFit::MinMedianMax,
            FigBackend::FuzzyCMeans => GranuleFit::FuzzyCMeans {
                clusters: self.clusters,
                fuzziness: self.fuzziness,
                tolerance: self.tolerance,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelieffConfig {
    pub k: usize,
    /// Sampled instances; every training row when absent.
    pub m_samples: Option<usize>,
    /// Exogenous features kept as model channels.
    pub top_n: usize,
}

impl Default for RelieffConfig {
    fn default() -> Self {
        Self { k: 70, m_samples: None, top_n: 1 }
    }
}

/// Synthetic corpus and schedule for backbone pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub stations: usize,
    pub days: usize,
    pub density: f64,
    pub noise: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { stations: 8, days: 28, density: 0.3, noise: 0.1, epochs: 20, learning_rate: 0.01, batch_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every named random stream.
    pub seed: u64,
    pub io: IoConfig,
    pub data: DataConfig,
    pub vmd: VmdConfig,
    pub iceemdan: EnsembleConfig,
    pub msse: MsseConfig,
    pub fig: FigConfig,
    pub relieff: RelieffConfig,
    /// `in_channels` is derived from the assembled channels at run time;
    /// freezing and masking come from `train.ablation`.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub pretrain: PretrainConfig,
}

/// Values given on the command line; each one beats the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub kind: Option<SeriesKind>,
    pub horizon: Option<usize>,
    pub lookback: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub series: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub holidays: Option<PathBuf>,
    pub exogenous: Vec<PathBuf>,
    pub column_map: Option<PathBuf>,
    pub backbone: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Default < file < flags.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> CliResult<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, flags: &Overrides) {
        if let Some(s) = flags.seed {
            self.seed = s;
        }
        if let Some(k) = flags.kind {
            self.data.kind = k;
        }
        if let Some(h) = flags.horizon {
            self.model.horizon = h;
        }
        if let Some(p) = flags.lookback {
            self.model.lookback = p;
        }
        let io = &mut self.io;
        for (slot, flag) in [
            (&mut io.series, &flags.series),
            (&mut io.adjacency, &flags.adjacency),
            (&mut io.holidays, &flags.holidays),
            (&mut io.column_map, &flags.column_map),
            (&mut io.backbone, &flags.backbone),
            (&mut io.checkpoint, &flags.checkpoint),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if !flags.exogenous.is_empty() {
            io.exogenous.clone_from(&flags.exogenous);
        }
        if let Some(d) = &flags.out_dir {
            io.out_dir.clone_from(d);
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.vmd.validate()?;
        if self.vmd.modes < 2 {
            return bad("vmd.modes must be at least 2 (the top mode is dropped)".into());
        }
        if self.iceemdan.ensemble_n < 1 || !(self.iceemdan.noise_amp >= 0.0) {
            return bad("iceemdan.ensemble_n must be >= 1 and noise_amp >= 0".into());
        }
        if self.msse.tau_max < 1 || !(self.msse.r_frac >= 0.0) {
            return bad("msse.tau_max must be >= 1 and r_frac >= 0".into());
        }
        if self.fig.windows.is_empty() || self.fig.windows.contains(&0) {
            return bad("fig.windows must be non-empty and positive".into());
        }
        if self.relieff.k < 1 || self.relieff.m_samples == Some(0) {
            return bad("relieff.k and relieff.m_samples must be at least 1".into());
        }
        let ablation = &self.train.ablation;
        let defaults = ModelConfig::default();
        if self.model.freeze_mode != defaults.freeze_mode && self.model.freeze_mode != ablation.freeze_mode {
            return bad("set the freeze mode with train.ablation.freeze_mode, not model.freeze_mode".into());
        }
        if self.model.graph_mask != defaults.graph_mask && self.model.graph_mask != ablation.use_graph_mask {
            return bad("set masking with train.ablation.use_graph_mask, not model.graph_mask".into());
        }
        self.model_config(1).validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        let p = &self.pretrain;
        if p.stations < 2 || p.days < 14 || p.epochs < 1 || p.batch_size < 1 || !(p.learning_rate > 0.0) {
            return bad("pretrain needs stations >= 2, days >= 14 and positive epochs, batch_size, learning_rate".into());
        }
        let sum: f64 = self.data.split.iter().sum();
        if self.data.split.iter().any(|r| !(*r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("data.split must be positive fractions summing to 1, got {:?}", self.data.split));
        }
        Ok(())
    }

    pub fn decomposition(&self) -> MultiFrequencyConfig {
        MultiFrequencyConfig { vmd: self.vmd, ensemble: self.iceemdan, msse: self.msse }
    }

    /// Model shape for `channels` inputs with the ablation's freezing and
    /// masking applied.
    pub fn model_config(&self, channels: usize) -> ModelConfig {
        let base = ModelConfig { in_channels: channels, ..self.model.clone() };
        self.train.ablation.model_config(&base)
    }

    /// Backbone shape: everything trainable, unquantized.
    pub fn pretrain_model_config(&self, channels: usize) -> ModelConfig {
        ModelConfig { freeze_mode: FreezeMode::None, ..self.model_config(channels) }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form of the resolved config.
    /// SHA-256 of the settings, leaving out the `io` file locations so runs
    /// over copies of the same inputs share a hash.
    pub fn hash(&self) -> String {
        let settings = PipelineConfig { io: IoConfig::default(), ..self.clone() };
        let json = serde_json::to_string(&settings).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_published_settings() {
        let c = PipelineConfig::default();
        assert_eq!((c.vmd.modes, c.vmd.alpha, c.vmd.tau, c.vmd.tol), (8, 100.0, 0.0, 1e-7));
        assert_eq!(u8::from(c.vmd.init), 1);
        assert_eq!((c.iceemdan.ensemble_n, c.iceemdan.noise_amp), (100, 0.2));
        assert_eq!((c.fig.clusters, c.fig.fuzziness, c.fig.tolerance), (5, 2.0, 1e-5));
        assert_eq!(c.relieff.k, 70);
        assert_eq!(c.model.lookback, 12);
        assert_eq!((c.train.learning_rate, c.train.max_epochs, c.train.batch_size), (0.01, 300, 64));
        assert_eq!(c.data.split, [0.8, 0.1, 0.1]);
        c.validate().unwrap();
    }

    #[test]
    fn partial_sections_and_unknown_keys() {
        let c = PipelineConfig::from_toml("seed = 3\n[vmd]\nmodes = 6\n[train]\nmax_epochs = 5\n").unwrap();
        assert_eq!((c.seed, c.vmd.modes, c.vmd.alpha, c.train.max_epochs, c.train.batch_size), (3, 6, 100.0, 5, 64));
        assert!(matches!(PipelineConfig::from_toml("[vmd]\nmodez = 6\n"), Err(CliError::Config(_))));
        assert!(matches!(PipelineConfig::from_toml("colour = 1\n"), Err(CliError::Config(_))));
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\n[model]\nlookback = 6\nhorizon = 2\n").unwrap();
        let flags = Overrides { seed: Some(9), horizon: Some(4), ..Overrides::default() };
        let c = PipelineConfig::resolve(Some(&path), &flags).unwrap();
        assert_eq!((c.seed, c.model.lookback, c.model.horizon, c.model.d_model), (9, 6, 4, 32));
        let echoed = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(echoed, c);
        assert_eq!(echoed.hash(), c.hash());
        assert_ne!(PipelineConfig::default().hash(), c.hash());
        let mut moved = c.clone();
        moved.io.out_dir = "elsewhere".into();
        assert_eq!(moved.hash(), c.hash());
    }

    #[test]
    fn violations_are_config_errors() {
        for text in [
            "[vmd]\nmodes = 1\n",
            "[data]\nsplit = [0.5, 0.5, 0.1]\n",
            "[train]\nlearning_rate = 0.0\n",
            "[model]\nfreeze_mode = \"none\"\n",
            "[loss]\nlambda = -1.0\n",
        ] {
            let c = PipelineConfig::from_toml(text).unwrap();
            assert!(matches!(c.validate(), Err(CliError::Config(_))), "{text}");
        }
        let c = PipelineConfig::from_toml("[train.ablation]\nfreeze_mode = \"none\"\n").unwrap();
        c.validate().unwrap();
        assert_eq!(c.model_config(3).freeze_mode, FreezeMode::None);
        assert_eq!(c.model_config(3).in_channels, 3);
    }
}
