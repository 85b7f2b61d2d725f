//! Seeded synthetic charging data with a known generating process.
//!
//! Each station's clean series is
//!
//! ```text
//! clean(t, n) = (base[n] + daily[n] * sin(2 pi (hour(t) + phase[n]) / 24))
//!                   * (1 + weekly * cos(2 pi dow(t) / 7))
//!             + shared * (z(t, n) + sum_j W[n][j] z(t - lag, j))
//! z(t, j)     = sin(2 pi t / period[j] + offset[j])
//! ```
//!
//! with `W` the adjacency without self-loops, row-normalized. Holiday hours
//! are scaled by `1 - holiday_depth`. The random part, scaled by `noise`,
//! adds an AR(1) latent per station diffused the same way as `z`, plus
//! observation noise that doubles on holidays. Values are clipped at 0.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use evstllm_core::domain::{CalendarFrame, StationGraph};
use evstllm_core::seed;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{self, TimeTable};

pub const LATENT_AR: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub stations: usize,
    pub days: usize,
    /// Edge probability between distinct stations.
    pub density: f64,
    pub noise: f64,
    pub start: NaiveDateTime,
    pub holidays: Vec<NaiveDate>,
}

impl SynthConfig {
    pub fn new(seed: u64, stations: usize, days: usize) -> Self {
        let start = NaiveDate::from_ymd_opt(2023, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let holidays = (22..=26).map(|d| NaiveDate::from_ymd_opt(2023, 1, d).unwrap()).collect();
        Self { seed, stations, days, density: 0.3, noise: 1.0, start, holidays }
    }
}

/// Every drawn generation parameter, enough to recompute the clean series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub ids: Vec<String>,
    pub adjacency: Vec<Vec<u8>>,
    pub base: Vec<f64>,
    pub daily: Vec<f64>,
    pub phase: Vec<f64>,
    pub weekly: f64,
    pub shared: f64,
    pub period: Vec<f64>,
    pub offset: Vec<f64>,
    pub lag: usize,
    pub holiday_depth: f64,
    /// Observation noise standard deviation per unit of `noise`, per station.
    pub obs_scale: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub manifest: Manifest,
    pub graph: StationGraph,
    pub calendar: CalendarFrame,
    /// `(T, N)`.
    pub series: Array2<f64>,
    pub temperature: Vec<f64>,
    pub price: Vec<f64>,
}

fn tariff(hour: u8) -> f64 {
    match hour {
        0..=6 => 0.5,
        10..=11 | 18..=20 => 1.5,
        _ => 1.0,
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> CliResult<SynthData> {
    if cfg.stations < 2 || cfg.days < 14 {
        return Err(CliError::Config(format!("synth needs at least 2 stations and 14 days, got {} and {}", cfg.stations, cfg.days)));
    }
    if !(0.0..=1.0).contains(&cfg.density) || !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(CliError::Config("synth density must lie in [0, 1] and noise be non-negative".into()));
    }
    let n = cfg.stations;
    let len = cfg.days * 24;
    let ids: Vec<String> = (1..=n).map(|i| format!("S{i:02}")).collect();

    let mut g = seed::rng(seed::sub_seed(cfg.seed, "synth.graph"));
    let mut adj = Array2::<u8>::eye(n);
    for i in 0..n {
        for j in i + 1..n {
            if g.random::<f64>() < cfg.density {
                adj[[i, j]] = 1;
                adj[[j, i]] = 1;
            }
        }
    }
    for i in 0..n {
        if adj.row(i).sum() == 1 {
            let j = (i + 1) % n;
            adj[[i, j]] = 1;
            adj[[j, i]] = 1;
        }
    }
    let graph = StationGraph::new(ids.clone(), adj.clone())?;

    let mut p = seed::rng(seed::sub_seed(cfg.seed, "synth.params"));
    let base: Vec<f64> = (0..n).map(|_| p.random_range(20.0..40.0)).collect();
    let daily: Vec<f64> = base.iter().map(|b| b * p.random_range(0.3..0.6)).collect();
    let phase: Vec<f64> = (0..n).map(|_| p.random_range(-3.0..3.0)).collect();
    let period: Vec<f64> = (0..n).map(|_| p.random_range(30.0..80.0)).collect();
    let offset: Vec<f64> = (0..n).map(|_| p.random_range(0.0..2.0 * PI)).collect();
    let obs_scale: Vec<f64> = base.iter().map(|b| 0.1 * b).collect();
    let manifest = Manifest {
        config: cfg.clone(),
        ids: ids.clone(),
        adjacency: adj.rows().into_iter().map(|r| r.to_vec()).collect(),
        base,
        daily,
        phase,
        weekly: 0.15,
        shared: 6.0,
        period,
        offset,
        lag: 2,
        holiday_depth: 0.4,
        obs_scale,
    };

    let holidays: BTreeSet<NaiveDate> = cfg.holidays.iter().copied().collect();
    let calendar = CalendarFrame::hourly(cfg.start, len)?;
    let flags = evstllm_core::select::holiday_indicator(&calendar, &holidays);
    let calendar = calendar.with_holidays(flags)?;

    // Neighbor weights without self-loops.
    let weights = Array2::from_shape_fn((n, n), |(i, j)| {
        let deg = (0..n).filter(|&k| k != i && adj[[i, k]] == 1).count();
        if i != j && adj[[i, j]] == 1 { 1.0 / deg as f64 } else { 0.0 }
    });
    let m = &manifest;
    let z = |t: i64, j: usize| (2.0 * PI * t as f64 / m.period[j] + m.offset[j]).sin();

    let mut r = seed::rng(seed::sub_seed(cfg.seed, "synth.noise"));
    let innovation = (1.0 - LATENT_AR * LATENT_AR).sqrt();
    let mut latent = Array2::<f64>::zeros((len, n));
    let mut obs = Array2::<f64>::zeros((len, n));
    for t in 0..len {
        for j in 0..n {
            let prev = if t > 0 { latent[[t - 1, j]] } else { 0.0 };
            latent[[t, j]] = LATENT_AR * prev + innovation * r.sample::<f64, _>(StandardNormal);
            obs[[t, j]] = r.sample::<f64, _>(StandardNormal);
        }
    }

    let mut series = Array2::zeros((len, n));
    for t in 0..len {
        let hour = calendar.hour_of_day()[t] as f64;
        let dow = calendar.day_of_week()[t] as f64;
        let holiday = calendar.holiday_flag()[t] == 1;
        let week = 1.0 + m.weekly * (2.0 * PI * dow / 7.0).cos();
        for i in 0..n {
            let mut spread = z(t as i64, i);
            let mut random = latent[[t, i]];
            for j in 0..n {
                if weights[[i, j]] > 0.0 {
                    spread += weights[[i, j]] * z(t as i64 - m.lag as i64, j);
                    if t >= m.lag {
                        random += weights[[i, j]] * latent[[t - m.lag, j]];
                    }
                }
            }
            let mut clean = (m.base[i] + m.daily[i] * (2.0 * PI * (hour + m.phase[i]) / 24.0).sin()) * week + m.shared * spread;
            if holiday {
                clean *= 1.0 - m.holiday_depth;
            }
            let erratic = if holiday { 2.0 } else { 1.0 };
            let noisy = cfg.noise * (m.shared * random + erratic * m.obs_scale[i] * obs[[t, i]]);
            series[[t, i]] = (clean + noisy).max(0.0);
        }
    }

    let temperature = (0..len)
        .map(|t| {
            let hour = calendar.hour_of_day()[t] as f64;
            10.0 + 6.0 * (2.0 * PI * (hour - 9.0) / 24.0).sin() + 3.0 * (2.0 * PI * t as f64 / (24.0 * 60.0)).cos()
                + cfg.noise * r.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let price = calendar.hour_of_day().iter().map(|&h| tariff(h)).collect();
    Ok(SynthData { manifest, graph, calendar, series, temperature, price })
}

pub const SERIES_FILE: &str = "series.csv";
pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const HOLIDAY_FILE: &str = "holidays.csv";
pub const TEMPERATURE_FILE: &str = "temperature.csv";
pub const PRICE_FILE: &str = "price.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the ingestion files and the manifest into `dir`.
pub fn write_synth(dir: &Path, data: &SynthData) -> CliResult<()> {
    let ids = &data.manifest.ids;
    io::write_charging_csv(&dir.join(SERIES_FILE), ids, &data.calendar, &data.series)?;
    io::write_adjacency_csv(&dir.join(ADJACENCY_FILE), &data.graph)?;
    io::write_holidays(&dir.join(HOLIDAY_FILE), &data.manifest.config.holidays.iter().copied().collect())?;
    for (file, name, values) in
        [(TEMPERATURE_FILE, "temperature", &data.temperature), (PRICE_FILE, "price", &data.price)]
    {
        let table = TimeTable {
            columns: vec![name.to_string()],
            timestamps: data.calendar.timestamps().to_vec(),
            values: Array2::from_shape_vec((values.len(), 1), values.clone()).expect("column"),
        };
        io::write_time_table(&dir.join(file), &table)?;
    }
    let json = serde_json::to_string_pretty(&data.manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))
}

/// The holiday dates covered by a calendar starting at `start`.
pub fn holidays_within(start: NaiveDateTime, days: usize, holidays: &[NaiveDate]) -> usize {
    let first = start.date();
    let last = first + Duration::days(days as i64 - 1);
    holidays.iter().filter(|d| (first..=last).contains(d)).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_is_reproducible_and_seeds_differ() {
        let a = synth_generate(&SynthConfig::new(4, 3, 14)).unwrap();
        let b = synth_generate(&SynthConfig::new(4, 3, 14)).unwrap();
        let c = synth_generate(&SynthConfig::new(5, 3, 14)).unwrap();
        assert_eq!(a.series, b.series);
        assert_eq!(a.manifest, b.manifest);
        assert_ne!(a.series, c.series);
        assert_eq!(a.series.dim(), (14 * 24, 3));
    }

    #[test]
    fn holidays_suppress_demand() {
        let d = synth_generate(&SynthConfig::new(1, 4, 35)).unwrap();
        assert_eq!(holidays_within(d.manifest.config.start, 35, &d.manifest.config.holidays), 5);
        let flags = d.calendar.holiday_flag();
        let mean = |h: u8| {
            let v: Vec<f64> = (0..flags.len()).filter(|&t| flags[t] == h).flat_map(|t| d.series.row(t).to_vec()).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(1) < mean(0));
    }

    #[test]
    fn rejects_small_sizes() {
        assert!(synth_generate(&SynthConfig::new(0, 1, 30)).is_err());
        assert!(synth_generate(&SynthConfig::new(0, 3, 13)).is_err());
        let mut cfg = SynthConfig::new(0, 3, 20);
        cfg.noise = -1.0;
        assert!(synth_generate(&cfg).is_err());
    }

    #[test]
    fn every_station_has_a_neighbor() {
        let mut cfg = SynthConfig::new(2, 6, 14);
        cfg.density = 0.0;
        let d = synth_generate(&cfg).unwrap();
        assert!(d.graph.adjacency().rows().into_iter().all(|r| r.sum() >= 2));
    }
}
