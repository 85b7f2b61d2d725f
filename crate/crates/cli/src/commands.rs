//! Command surface. Every command resolves the config, prints its hash and
//! writes its outputs under `io.out_dir`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use evstllm_core::granulate::fig_granulate_with;
use evstllm_core::stllm::checkpoint::Checkpoint;
use evstllm_core::stllm::PfgaModel;
use evstllm_core::train::{EpochRecord, Evaluation};
use evstllm_core::Execution;
use serde::Serialize;

use crate::config::{Overrides, PipelineConfig, SeriesKind};
use crate::error::{CliError, CliResult};
use crate::pipeline::{self, Dataset, TrainedModel};
use crate::synth::{self, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "evstllm", version, about = "Station-level EV charging forecasting pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct GlobalArgs {
    /// TOML config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub kind: Option<SeriesKind>,
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    #[arg(long, global = true)]
    pub lookback: Option<usize>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Also write per-mode and per-component decomposition files.
    #[arg(long, global = true)]
    pub dump: bool,
    #[arg(long, global = true)]
    pub series: Option<PathBuf>,
    #[arg(long, global = true)]
    pub adjacency: Option<PathBuf>,
    #[arg(long, global = true)]
    pub holidays: Option<PathBuf>,
    /// Exogenous feature file; repeat for several.
    #[arg(long, global = true)]
    pub exogenous: Vec<PathBuf>,
    #[arg(long, global = true)]
    pub column_map: Option<PathBuf>,
    #[arg(long, global = true)]
    pub backbone: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Run data-parallel loops on one thread (results are identical).
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset and its manifest.
    Synth {
        #[arg(long, default_value_t = 8)]
        stations: usize,
        #[arg(long, default_value_t = 60)]
        days: usize,
        #[arg(long, default_value_t = 0.3)]
        density: f64,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
    },
    /// Denoise and split each station's series into high/mid/low bands.
    Decompose,
    /// Fuzzy granules at each configured window.
    Granulate,
    /// ReliefF weights of the exogenous features.
    Select,
    /// Train a full-precision backbone on a synthetic corpus.
    Pretrain,
    /// Fine-tune the forecaster.
    Train,
    /// Test-split metrics of a trained model and the persistence baseline.
    Evaluate,
    /// Predict the steps after the end of the series.
    Forecast,
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            kind: self.kind,
            horizon: self.horizon,
            lookback: self.lookback,
            out_dir: self.out_dir.clone(),
            series: self.series.clone(),
            adjacency: self.adjacency.clone(),
            holidays: self.holidays.clone(),
            exogenous: self.exogenous.clone(),
            column_map: self.column_map.clone(),
            backbone: self.backbone.clone(),
            checkpoint: self.checkpoint.clone(),
        }
    }

    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

pub const BACKBONE_FILE: &str = "backbone.json";
pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const FORECAST_FILE: &str = "forecast.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_csv<R: IntoIterator<Item = Vec<String>>>(path: &Path, header: &[&str], rows: R) -> CliResult<()> {
    let mut text = header.join(",") + "\n";
    for r in rows {
        text.push_str(&r.join(","));
        text.push('\n');
    }
    write_file(path, &text)
}

fn epoch_log(records: &[EpochRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

/// Runs a parsed command line; returns the lines printed to stdout.
pub fn run(cli: &Cli) -> CliResult<Vec<String>> {
    let cfg = PipelineConfig::resolve(cli.global.config.as_deref(), &cli.global.overrides())?;
    let exec = cli.global.execution();
    let out = cfg.io.out_dir.clone();
    let mut lines = vec![format!("config hash: {}", cfg.hash())];
    match &cli.command {
        Command::Synth { stations, days, density, noise } => {
            let mut sc = SynthConfig::new(cfg.seed, *stations, *days);
            sc.density = *density;
            sc.noise = *noise;
            let data = synth::synth_generate(&sc)?;
            synth::write_synth(&out, &data)?;
            lines.push(format!("wrote {} stations x {} hours to {}", stations, days * 24, out.display()));
        }
        Command::Decompose => {
            let data = load(&cfg, &mut lines)?;
            let results = pipeline::decompose_stations(&data, &cfg, exec)?;
            let ts: Vec<String> = data.calendar.timestamps().iter().map(|t| t.format(crate::io::TIME_FORMAT).to_string()).collect();
            let mut summary = Vec::new();
            for (id, r) in data.ids.iter().zip(&results) {
                let dir = out.join("decompose");
                write_csv(
                    &dir.join(format!("{id}_bands.csv")),
                    &["timestamp", "denoised", "high", "mid", "low"],
                    (0..ts.len()).map(|t| {
                        vec![ts[t].clone(), r.denoised[t].to_string(), r.bands.high[t].to_string(), r.bands.mid[t].to_string(), r.bands.low[t].to_string()]
                    }),
                )?;
                if cli.global.dump {
                    let retained = &r.modes[..r.modes.len() - 1];
                    let names: Vec<String> = (0..retained.len()).map(|k| format!("mode{k}")).collect();
                    let mut header = vec!["timestamp"];
                    header.extend(names.iter().map(String::as_str));
                    write_csv(
                        &dir.join(format!("{id}_modes.csv")),
                        &header,
                        (0..ts.len()).map(|t| {
                            let mut row = vec![ts[t].clone()];
                            row.extend(retained.iter().map(|m| m.samples[t].to_string()));
                            row
                        }),
                    )?;
                    let ids: Vec<&str> = r.components.iter().map(|c| c.id.as_str()).collect();
                    let mut header = vec!["timestamp"];
                    header.extend(ids.iter().copied());
                    write_csv(
                        &dir.join(format!("{id}_components.csv")),
                        &header,
                        (0..ts.len()).map(|t| {
                            let mut row = vec![ts[t].clone()];
                            row.extend(r.components.iter().map(|c| c.samples[t].to_string()));
                            row
                        }),
                    )?;
                }
                summary.push(serde_json::json!({
                    "station": id,
                    "center_freqs": r.modes.iter().map(|m| m.center_freq).collect::<Vec<_>>(),
                    "mode_complexity": r.mode_complexity,
                    "refined_mode": r.refined_mode,
                    "components": r.components.iter().zip(&r.bands.membership).map(|(c, b)| serde_json::json!({
                        "id": c.id, "complexity": c.complexity, "band": b.name(),
                    })).collect::<Vec<_>>(),
                }));
            }
            write_file(&out.join("decompose").join("summary.json"), &json(&summary))?;
            lines.push(format!("decomposed {} stations into {}", data.ids.len(), out.join("decompose").display()));
        }
        Command::Granulate => {
            let data = load(&cfg, &mut lines)?;
            let fit = cfg.fig.fit();
            for (n, id) in data.ids.iter().enumerate() {
                let series = data.target.column(n).to_vec();
                for &w in &cfg.fig.windows {
                    let g = fig_granulate_with(&series, w, &fit)?;
                    write_csv(
                        &out.join("granulate").join(format!("{id}_w{w}.csv")),
                        &["window_index", "a", "m", "b"],
                        g.granules.iter().enumerate().map(|(i, g)| vec![i.to_string(), g.a.to_string(), g.m.to_string(), g.b.to_string()]),
                    )?;
                }
            }
            lines.push(format!("granulated {} stations at windows {:?}", data.ids.len(), cfg.fig.windows));
        }
        Command::Select => {
            let data = load(&cfg, &mut lines)?;
            let Some(sel) = pipeline::select_exogenous(&data, &cfg, exec)? else {
                return Err(CliError::Data("no exogenous feature files given (io.exogenous or --exogenous)".into()));
            };
            let mut order: Vec<usize> = (0..sel.weights.len()).collect();
            order.sort_by(|&a, &b| sel.weights[b].total_cmp(&sel.weights[a]).then(a.cmp(&b)));
            write_csv(
                &out.join("select").join("weights.csv"),
                &["feature_name", "weight"],
                order.iter().map(|&i| vec![sel.candidates[i].clone(), sel.weights[i].to_string()]),
            )?;
            if sel.clamped {
                lines.push(format!("notice: ReliefF neighbor count {} clamped for small classes", sel.k));
            }
            for &i in &order {
                lines.push(format!("{}\t{:.6}", sel.candidates[i], sel.weights[i]));
            }
        }
        Command::Pretrain => {
            let (model, report) = pipeline::pretrain(&cfg, exec)?;
            write_file(&out.join(BACKBONE_FILE), &json(&model.to_checkpoint()))?;
            write_file(&out.join("pretrain_log.jsonl"), &epoch_log(&report.log))?;
            lines.push(format!("backbone: best epoch {} (valid MAE {:.6})", report.best_epoch, report.best_valid_mae));
        }
        Command::Train => {
            let data = load(&cfg, &mut lines)?;
            let prepared = pipeline::prepare(&data, &cfg, exec)?;
            let backbone = match &cfg.io.backbone {
                Some(p) => PfgaModel::from_checkpoint(&read_json::<Checkpoint>(p)?)?,
                None => {
                    lines.push("notice: no backbone given, pretraining in-process".into());
                    pipeline::pretrain(&cfg, exec)?.0
                }
            };
            let (model, report) = pipeline::train_model(&prepared, &cfg, Some(&backbone), exec)?;
            let trained = TrainedModel::new(&cfg, &prepared, &model);
            write_file(&out.join(MODEL_FILE), &json(&trained))?;
            write_file(&out.join("train_log.jsonl"), &epoch_log(&report.log))?;
            write_file(&out.join(RESOLVED_CONFIG_FILE), &cfg.to_toml())?;
            lines.push(format!(
                "trained {} parameters on {} windows: best epoch {} (valid MAE {:.6})",
                model.trainable_count(),
                prepared.train.len(),
                report.best_epoch,
                report.best_valid_mae
            ));
        }
        Command::Evaluate => {
            let (prepared, model) = load_trained(&cfg, exec, &mut lines)?;
            let (report, eval) = pipeline::evaluate_model(&model, &prepared, &cfg, exec)?;
            write_file(&out.join(METRICS_FILE), &pipeline::metrics_json(&report))?;
            write_predictions(&out.join(PREDICTIONS_FILE), &eval)?;
            lines.push(format!(
                "test MAE {:.6}, RMSE {:.6} (persistence MAE {:.6}) over {} windows",
                report.model.aggregate.mae, report.model.aggregate.rmse, report.persistence.aggregate.mae, report.windows
            ));
        }
        Command::Forecast => {
            let (prepared, model) = load_trained(&cfg, exec, &mut lines)?;
            let (times, pred) = pipeline::forecast_latest(&model, &prepared)?;
            let ids = prepared.graph.node_ids();
            let mut header = vec!["timestamp"];
            header.extend(ids.iter().map(String::as_str));
            let rows: Vec<Vec<String>> = times
                .iter()
                .zip(pred.rows())
                .map(|(t, r)| {
                    let mut row = vec![t.format(crate::io::TIME_FORMAT).to_string()];
                    row.extend(r.iter().map(|v| v.to_string()));
                    row
                })
                .collect();
            for r in &rows {
                let mut line = String::new();
                write!(line, "{}", r.join("\t")).expect("string write");
                lines.push(line);
            }
            write_csv(&out.join(FORECAST_FILE), &header, rows)?;
        }
    }
    Ok(lines)
}

fn load(cfg: &PipelineConfig, lines: &mut Vec<String>) -> CliResult<Dataset> {
    let data = Dataset::load(cfg)?;
    lines.extend(data.notices.iter().cloned());
    Ok(data)
}

fn load_trained(cfg: &PipelineConfig, exec: Execution, lines: &mut Vec<String>) -> CliResult<(pipeline::Prepared, PfgaModel)> {
    let path = cfg.io.checkpoint.clone().unwrap_or_else(|| cfg.io.out_dir.join(MODEL_FILE));
    let trained: TrainedModel = read_json(&path)?;
    let data = load(cfg, lines)?;
    let prepared = pipeline::prepare(&data, cfg, exec)?;
    trained.check_compatible(&prepared)?;
    if trained.config_hash != cfg.hash() {
        lines.push(format!("notice: checkpoint was trained under config hash {}", trained.config_hash));
    }
    let model = trained.model()?;
    if model.config().lookback != cfg.model.lookback || model.config().horizon != cfg.model.horizon {
        return Err(CliError::Config("checkpoint lookback/horizon differ from the config".into()));
    }
    Ok((prepared, model))
}

fn write_predictions(path: &Path, eval: &Evaluation) -> CliResult<()> {
    write_csv(
        path,
        &["window_start", "step", "station", "y_true", "y_pred"],
        eval.predictions.iter().map(|p| {
            vec![p.window_start.to_string(), p.step.to_string(), p.station.to_string(), p.y_true.to_string(), p.y_pred.to_string()]
        }),
    )
}
