//! Dataset loading, channel assembly, standardization, and the
//! pretrain / train / evaluate / forecast steps shared by the commands.

use std::collections::BTreeSet;
use std::ops::Range;

use chrono::{Duration, NaiveDateTime};
use evstllm_core::decompose::{multi_frequency_pipeline, Band, DecompositionResult};
use evstllm_core::domain::{make_windows, split_ranges, CalendarFrame, CalendarRow, SeriesTensor, StationGraph, WindowedSample};
use evstllm_core::granulate::granule_channels;
use evstllm_core::select::{holiday_indicator, quartile_labels, relieff, select_features, FeatureKind, FeatureTable, FeatureWeights};
use evstllm_core::stllm::checkpoint::Checkpoint;
use evstllm_core::stllm::PfgaModel;
use evstllm_core::train::{evaluate, fit, Evaluation, FitReport, MetricSet, TargetScale, TrainConfig};
use evstllm_core::{seed, Execution};
use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::io;
use crate::synth::{synth_generate, SynthConfig, SynthData};

/// Named stream for the pretraining corpus.
pub const PRETRAIN_CORPUS: &str = "pretrain.corpus";
/// Standard deviations below this are treated as 1 when scaling.
const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    /// Raw target, `(T, N)`.
    pub target: Array2<f64>,
    /// Carries the holiday flags.
    pub calendar: CalendarFrame,
    pub graph: StationGraph,
    /// Candidate exogenous features, each `(T, N)`.
    pub exogenous: Vec<(String, Array2<f64>)>,
    pub notices: Vec<String>,
}

impl Dataset {
    /// Reads the files named in `cfg.io`. Without an adjacency file every
    /// station attends to every other.
    pub fn load(cfg: &PipelineConfig) -> CliResult<Self> {
        let series = cfg.io.series.as_ref().ok_or_else(|| CliError::Data("no series file given (io.series or --series)".into()))?;
        let map = cfg.io.column_map.as_deref().map(io::load_column_map).transpose()?;
        let data = io::load_charging_csv(series, cfg.data.kind, map.as_deref())?;
        let mut notices = data.notices;
        let graph = match &cfg.io.adjacency {
            Some(p) => {
                let (g, more) = io::load_adjacency_csv(p, &data.ids)?;
                notices.extend(more);
                g
            }
            None => {
                notices.push("notice: no adjacency file, using a complete graph".into());
                StationGraph::new(data.ids.clone(), StationGraph::complete(data.ids.len()).adjacency().clone())?
            }
        };
        let holidays = match &cfg.io.holidays {
            Some(p) => io::load_holidays(p)?,
            None => BTreeSet::new(),
        };
        let flags = holiday_indicator(&data.calendar, &holidays);
        let calendar = data.calendar.with_holidays(flags)?;
        let exogenous = cfg.io.exogenous.iter().map(|p| io::load_exogenous(p, &calendar, &data.ids)).collect::<CliResult<_>>()?;
        let target = data.series.values().index_axis(Axis(2), 0).to_owned();
        Ok(Self { ids: data.ids, target, calendar, graph, exogenous, notices })
    }

    pub fn from_synth(data: &SynthData) -> Self {
        let broadcast = |v: &[f64]| Array2::from_shape_fn((v.len(), data.manifest.ids.len()), |(t, _)| v[t]);
        Self {
            ids: data.manifest.ids.clone(),
            target: data.series.clone(),
            calendar: data.calendar.clone(),
            graph: data.graph.clone(),
            exogenous: vec![("temperature".into(), broadcast(&data.temperature)), ("price".into(), broadcast(&data.price))],
            notices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.target.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stations(&self) -> usize {
        self.target.ncols()
    }

    pub fn splits(&self, cfg: &PipelineConfig) -> CliResult<[Range<usize>; 3]> {
        Ok(split_ranges(self.len(), cfg.data.split, cfg.model.lookback + cfg.model.horizon)?)
    }
}

/// Per-station multi-frequency decomposition of the raw target, each with
/// its own noise stream.
pub fn decompose_stations(data: &Dataset, cfg: &PipelineConfig, exec: Execution) -> CliResult<Vec<DecompositionResult>> {
    let mf = cfg.decomposition();
    let parts = exec.map(data.stations(), |n| {
        let signal = data.target.column(n).to_vec();
        multi_frequency_pipeline(&signal, &mf, seed::indexed_sub_seed(cfg.seed, seed::DECOMPOSE_NOISE, n as u64), exec)
    });
    parts.into_iter().map(|r| r.map_err(CliError::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub candidates: Vec<String>,
    pub weights: Vec<f64>,
    /// Indices into `candidates`, best first.
    pub selected: Vec<usize>,
    pub k: usize,
    pub clamped: bool,
}

/// ReliefF over the candidate exogenous features on the training rows of
/// every station, with quartile classes of the target.
pub fn select_exogenous(data: &Dataset, cfg: &PipelineConfig, exec: Execution) -> CliResult<Option<Selection>> {
    if data.exogenous.is_empty() {
        return Ok(None);
    }
    let train = data.splits(cfg)?[0].clone();
    let pooled = |m: &Array2<f64>| -> Vec<f64> {
        (0..data.stations()).flat_map(|n| m.slice(s![train.clone(), n]).to_vec()).collect()
    };
    let labels = quartile_labels(&pooled(&data.target))?;
    let names: Vec<String> = data.exogenous.iter().map(|(n, _)| n.clone()).collect();
    let columns: Vec<Vec<f64>> = data.exogenous.iter().map(|(_, m)| pooled(m)).collect();
    let table = FeatureTable::new(names.clone(), vec![FeatureKind::Continuous; names.len()], columns, labels)?;
    let m = cfg.relieff.m_samples.unwrap_or(table.n_rows());
    let w: FeatureWeights = relieff(&table, cfg.relieff.k, m, seed::sub_seed(cfg.seed, seed::RELIEFF_SAMPLE), exec)?;
    let keep = cfg.relieff.top_n.min(names.len());
    let selected = if keep == 0 { Vec::new() } else { select_features(&w, keep)? };
    Ok(Some(Selection { candidates: names, clamped: w.clamped(), weights: w.weights, selected, k: cfg.relieff.k }))
}

/// Model inputs in raw units.
#[derive(Debug, Clone)]
pub struct Channels {
    pub names: Vec<String>,
    /// `(T, N, C)`; channel 0 is the raw target.
    pub values: Array3<f64>,
    pub selection: Option<Selection>,
}

/// Stacks `[target, denoised, high, mid, low, granule cores..., holiday,
/// selected exogenous...]`, dropping the groups disabled by the ablation.
pub fn assemble_channels(data: &Dataset, cfg: &PipelineConfig, exec: Execution) -> CliResult<Channels> {
    let (t, n) = data.target.dim();
    let mut names = vec!["target".to_string()];
    let mut cols: Vec<Array2<f64>> = vec![data.target.clone()];
    let ablation = &cfg.train.ablation;
    if ablation.use_bands {
        let dec = decompose_stations(data, cfg, exec)?;
        let mut push = |name: &str, get: &dyn Fn(&DecompositionResult) -> &[f64]| {
            names.push(name.to_string());
            let per_station: Vec<&[f64]> = dec.iter().map(get).collect();
            cols.push(Array2::from_shape_fn((t, n), |(i, j)| per_station[j][i]));
        };
        push("denoised", &|d| &d.denoised);
        for band in [Band::High, Band::Mid, Band::Low] {
            push(band.name(), &|d| d.bands.band(band));
        }
    }
    if ablation.use_granules {
        let fit = cfg.fig.fit();
        let per_station = exec.try_map(n, |j| granule_channels(&data.target.column(j).to_vec(), &cfg.fig.windows, t, &fit))?;
        for (w_idx, w) in cfg.fig.windows.iter().enumerate() {
            names.push(format!("granule{w}"));
            cols.push(Array2::from_shape_fn((t, n), |(i, j)| per_station[j][w_idx][i]));
        }
    }
    names.push("holiday".into());
    let flags = data.calendar.holiday_flag();
    cols.push(Array2::from_shape_fn((t, n), |(i, _)| f64::from(flags[i])));
    let selection = select_exogenous(data, cfg, exec)?;
    if let Some(sel) = &selection {
        for &f in &sel.selected {
            names.push(sel.candidates[f].clone());
            cols.push(data.exogenous[f].1.clone());
        }
    }
    let views: Vec<_> = cols.iter().map(|c| c.view().insert_axis(Axis(2))).collect();
    let values = ndarray::concatenate(Axis(2), &views).expect("equal channel shapes");
    Ok(Channels { names, values, selection })
}

/// Per-station, per-channel z-scoring with training-split statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    /// `(N, C)`.
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
}

impl Scaler {
    pub fn fit(values: &Array3<f64>, train: Range<usize>) -> Self {
        let part = values.slice(s![train, .., ..]);
        let mean = part.mean_axis(Axis(0)).expect("non-empty training split");
        let std = part.std_axis(Axis(0), 0.0).mapv(|v| if v < MIN_STD { 1.0 } else { v });
        Self { mean, std }
    }

    pub fn apply(&self, values: &Array3<f64>) -> Array3<f64> {
        let mut out = values.clone();
        for mut step in out.outer_iter_mut() {
            step.zip_mut_with(&self.mean, |v, m| *v -= m);
            step.zip_mut_with(&self.std, |v, s| *v /= s);
        }
        out
    }

    pub fn target_scale(&self) -> TargetScale {
        TargetScale { mean: self.mean.column(0).to_vec(), std: self.std.column(0).to_vec() }
    }
}

/// Everything a model needs: scaled channels and the three window sets.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub channels: Channels,
    pub scaler: Scaler,
    pub scaled: SeriesTensor,
    pub calendar: CalendarFrame,
    pub graph: StationGraph,
    pub splits: [Range<usize>; 3],
    pub train: Vec<WindowedSample>,
    pub valid: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
}

impl Prepared {
    pub fn n_channels(&self) -> usize {
        self.channels.names.len()
    }
}

pub fn prepare(data: &Dataset, cfg: &PipelineConfig, exec: Execution) -> CliResult<Prepared> {
    let splits = data.splits(cfg)?;
    let channels = assemble_channels(data, cfg, exec)?;
    let scaler = Scaler::fit(&channels.values, splits[0].clone());
    let scaled = SeriesTensor::new(scaler.apply(&channels.values))?;
    let (p, h) = (cfg.model.lookback, cfg.model.horizon);
    let windows = |r: &Range<usize>| -> CliResult<Vec<WindowedSample>> {
        let part = scaled.slice_time(r.clone());
        let mut w = make_windows(&part, &data.calendar.slice(r.clone()), p, h)?;
        for s in &mut w {
            s.start += r.start;
        }
        Ok(w)
    };
    let (train, valid, test) = (windows(&splits[0])?, windows(&splits[1])?, windows(&splits[2])?);
    Ok(Prepared {
        channels,
        scaler,
        scaled,
        calendar: data.calendar.clone(),
        graph: data.graph.clone(),
        splits,
        train,
        valid,
        test,
    })
}

/// Trains a full-precision, fully trainable backbone on a synthetic corpus
/// prepared exactly like the real data, so its tensors line up.
pub fn pretrain(cfg: &PipelineConfig, exec: Execution) -> CliResult<(PfgaModel, FitReport)> {
    let p = &cfg.pretrain;
    let mut synth = SynthConfig::new(seed::sub_seed(cfg.seed, PRETRAIN_CORPUS), p.stations, p.days);
    synth.density = p.density;
    synth.noise = p.noise;
    let corpus = Dataset::from_synth(&synth_generate(&synth)?);
    let prepared = prepare(&corpus, cfg, exec)?;
    let mut model = PfgaModel::new(cfg.pretrain_model_config(prepared.n_channels()), cfg.seed)?;
    let tc = TrainConfig {
        learning_rate: p.learning_rate,
        max_epochs: p.epochs,
        batch_size: p.batch_size,
        ..cfg.train.clone()
    };
    let report = fit(&mut model, &prepared.train, &prepared.valid, &prepared.graph, &tc, &cfg.loss, cfg.seed, exec)?;
    Ok((model, report))
}

/// Fine-tunes the configured variant, starting from `backbone` when given.
pub fn train_model(
    prepared: &Prepared,
    cfg: &PipelineConfig,
    backbone: Option<&PfgaModel>,
    exec: Execution,
) -> CliResult<(PfgaModel, FitReport)> {
    let mc = cfg.model_config(prepared.n_channels());
    let mut model = match backbone {
        Some(b) => PfgaModel::from_backbone(b, mc, cfg.seed)?,
        None => PfgaModel::new(mc, cfg.seed)?,
    };
    let report = fit(&mut model, &prepared.train, &prepared.valid, &prepared.graph, &cfg.train, &cfg.loss, cfg.seed, exec)?;
    Ok((model, report))
}

/// A trained model with what is needed to use it on raw data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config_hash: String,
    pub channels: Vec<String>,
    pub scaler: Scaler,
    pub checkpoint: Checkpoint,
}

impl TrainedModel {
    pub fn new(cfg: &PipelineConfig, prepared: &Prepared, model: &PfgaModel) -> Self {
        Self {
            config_hash: cfg.hash(),
            channels: prepared.channels.names.clone(),
            scaler: prepared.scaler.clone(),
            checkpoint: model.to_checkpoint(),
        }
    }

    pub fn model(&self) -> CliResult<PfgaModel> {
        Ok(PfgaModel::from_checkpoint(&self.checkpoint)?)
    }

    /// Fails when `prepared` was assembled differently from training.
    pub fn check_compatible(&self, prepared: &Prepared) -> CliResult<()> {
        if self.channels != prepared.channels.names {
            return Err(CliError::Config(format!(
                "checkpoint expects channels {:?}, the data gives {:?}",
                self.channels, prepared.channels.names
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub windows: usize,
    pub horizon: usize,
    pub stations: usize,
    pub model: MetricSet,
    pub persistence: MetricSet,
    /// `1 - model MAE / persistence MAE`.
    pub mae_skill: f64,
}

pub fn evaluate_model(model: &PfgaModel, prepared: &Prepared, cfg: &PipelineConfig, exec: Execution) -> CliResult<(MetricsReport, Evaluation)> {
    let eval = evaluate(model, &prepared.test, &prepared.graph, &prepared.scaler.target_scale(), exec)?;
    let report = MetricsReport {
        config_hash: cfg.hash(),
        windows: eval.windows,
        horizon: cfg.model.horizon,
        stations: prepared.graph.len(),
        mae_skill: 1.0 - eval.model.aggregate.mae / eval.persistence.aggregate.mae,
        model: eval.model.clone(),
        persistence: eval.persistence.clone(),
    };
    Ok((report, eval))
}

pub fn metrics_json(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("metrics serialize") + "\n"
}

/// Predictions in raw units, `(S, N)`, for the steps right after the data,
/// with their timestamps.
pub fn forecast_latest(model: &PfgaModel, prepared: &Prepared) -> CliResult<(Vec<NaiveDateTime>, Array2<f64>)> {
    let cfg = model.config();
    let (p, h) = (cfg.lookback, cfg.horizon);
    let t = prepared.scaled.len();
    if t < p {
        return Err(CliError::Data(format!("series of length {t} is shorter than the lookback {p}")));
    }
    let cal = &prepared.calendar;
    let sample = WindowedSample {
        start: t - p,
        history: prepared.scaled.values().slice(s![t - p.., .., ..]).to_owned(),
        target: Array3::zeros((h, prepared.graph.len(), 1)),
        calendar: (t - p..t)
            .map(|i| CalendarRow { hour: cal.hour_of_day()[i], dow: cal.day_of_week()[i], holiday: cal.holiday_flag()[i] })
            .collect(),
    };
    let pred = model.predict(&sample, &prepared.graph)?;
    let scale = prepared.scaler.target_scale();
    let out = Array2::from_shape_fn((h, prepared.graph.len()), |(k, n)| scale.raw(n, pred[[k, n, 0]]));
    let last = *cal.timestamps().last().expect("non-empty calendar");
    let times = (1..=h).map(|k| last + Duration::hours(k as i64)).collect();
    Ok((times, out))
}
