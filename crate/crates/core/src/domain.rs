//! Shared data model: charging series, station graphs, calendars, dataset
//! splits and forecasting windows.

use std::ops::Range;

use chrono::{Datelike, NaiveDate, NaiveDateTime, TimeDelta, Timelike};
use ndarray::{s, Array2, Array3, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Time-major array of shape `(T, N, C)`. Channel 0 is the forecast target.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTensor {
    values: Array3<f64>,
}

impl SeriesTensor {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (t, n, c) = values.dim();
        if t == 0 || n == 0 || c == 0 {
            return Err(Error::Empty(format!("series tensor of shape ({t}, {n}, {c})")));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("series tensor at flat index {pos}")));
        }
        Ok(Self { values })
    }

    /// Builds a single-channel tensor from a `(T, N)` matrix.
    pub fn from_matrix(m: Array2<f64>) -> Result<Self> {
        let (t, n) = m.dim();
        let values = m.into_shape_with_order((t, n, 1)).map_err(|e| Error::shape(e.to_string()))?;
        Self::new(values)
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_stations(&self) -> usize {
        self.values.dim().1
    }

    pub fn n_channels(&self) -> usize {
        self.values.dim().2
    }

    /// The series of one station and channel, as a contiguous vector.
    pub fn column(&self, station: usize, channel: usize) -> Vec<f64> {
        self.values.slice(s![.., station, channel]).to_vec()
    }

    pub fn slice_time(&self, range: Range<usize>) -> SeriesTensor {
        SeriesTensor { values: self.values.slice(s![range, .., ..]).to_owned() }
    }

    /// Stacks tensors with matching `(T, N)` along the channel axis.
    pub fn concat_channels(parts: &[&SeriesTensor]) -> Result<SeriesTensor> {
        let views: Vec<ArrayView3<f64>> = parts.iter().map(|p| p.values.view()).collect();
        let values = ndarray::concatenate(Axis(2), &views).map_err(|e| Error::shape(e.to_string()))?;
        Ok(SeriesTensor { values })
    }
}

/// Station graph with a symmetric binary adjacency that always carries
/// self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct StationGraph {
    node_ids: Vec<String>,
    adjacency: Array2<u8>,
}

impl StationGraph {
    pub fn new(node_ids: Vec<String>, adjacency: Array2<u8>) -> Result<Self> {
        let n = node_ids.len();
        if n == 0 {
            return Err(Error::Empty("station graph".into()));
        }
        if adjacency.dim() != (n, n) {
            return Err(Error::shape(format!(
                "adjacency is {:?}, expected ({n}, {n})",
                adjacency.dim()
            )));
        }
        for i in 0..n {
            if adjacency[[i, i]] != 1 {
                return Err(Error::param(format!("adjacency diagonal entry {i} is not 1")));
            }
            for j in 0..n {
                let a = adjacency[[i, j]];
                if a > 1 {
                    return Err(Error::param(format!("adjacency entry ({i}, {j}) = {a} is not binary")));
                }
                if a != adjacency[[j, i]] {
                    return Err(Error::param(format!("adjacency is asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { node_ids, adjacency })
    }

    /// Graph on `n` anonymous nodes with the given adjacency.
    pub fn anonymous(adjacency: Array2<u8>) -> Result<Self> {
        let ids = (0..adjacency.nrows()).map(|i| format!("s{i}")).collect();
        Self::new(ids, adjacency)
    }

    pub fn identity(n: usize) -> Self {
        Self::anonymous(Array2::eye(n)).expect("identity adjacency is valid")
    }

    pub fn complete(n: usize) -> Self {
        Self::anonymous(Array2::ones((n, n))).expect("all-ones adjacency is valid")
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn adjacency(&self) -> &Array2<u8> {
        &self.adjacency
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[[i, j]] == 1
    }
}

/// Hourly calendar aligned with a series.
#[derive(Debug, Clone, PartialEq)]
pub struct CalendarFrame {
    timestamps: Vec<NaiveDateTime>,
    hour_of_day: Vec<u8>,
    day_of_week: Vec<u8>,
    holiday_flag: Vec<u8>,
}

impl CalendarFrame {
    /// Derives hour-of-day and day-of-week (Monday = 0) from the timestamps.
    /// Fails on gaps, duplicates or any stride other than one hour, naming the
    /// first offending index.
    pub fn from_timestamps(timestamps: Vec<NaiveDateTime>) -> Result<Self> {
        if timestamps.is_empty() {
            return Err(Error::Empty("calendar".into()));
        }
        for (i, w) in timestamps.windows(2).enumerate() {
            if w[1] - w[0] != TimeDelta::hours(1) {
                return Err(Error::param(format!(
                    "timestamp stride is not one hour at row {}: {} -> {}",
                    i + 1,
                    w[0],
                    w[1]
                )));
            }
        }
        let hour_of_day = timestamps.iter().map(|t| t.hour() as u8).collect();
        let day_of_week = timestamps.iter().map(|t| t.weekday().num_days_from_monday() as u8).collect();
        let holiday_flag = vec![0; timestamps.len()];
        Ok(Self { timestamps, hour_of_day, day_of_week, holiday_flag })
    }

    /// Hourly calendar of `len` steps starting at `start`.
    pub fn hourly(start: NaiveDateTime, len: usize) -> Result<Self> {
        let ts = (0..len).map(|i| start + TimeDelta::hours(i as i64)).collect();
        Self::from_timestamps(ts)
    }

    pub fn with_holidays(mut self, flags: Vec<u8>) -> Result<Self> {
        if flags.len() != self.len() {
            return Err(Error::shape(format!(
                "holiday flags have length {}, calendar {}",
                flags.len(),
                self.len()
            )));
        }
        if flags.iter().any(|&f| f > 1) {
            return Err(Error::param("holiday flags must be 0 or 1"));
        }
        self.holiday_flag = flags;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.timestamps.iter().map(|t| t.date())
    }

    pub fn hour_of_day(&self) -> &[u8] {
        &self.hour_of_day
    }

    pub fn day_of_week(&self) -> &[u8] {
        &self.day_of_week
    }

    pub fn holiday_flag(&self) -> &[u8] {
        &self.holiday_flag
    }

    pub fn slice(&self, range: Range<usize>) -> CalendarFrame {
        CalendarFrame {
            timestamps: self.timestamps[range.clone()].to_vec(),
            hour_of_day: self.hour_of_day[range.clone()].to_vec(),
            day_of_week: self.day_of_week[range.clone()].to_vec(),
            holiday_flag: self.holiday_flag[range].to_vec(),
        }
    }
}

/// One calendar row of a history window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CalendarRow {
    pub hour: u8,
    pub dow: u8,
    pub holiday: u8,
}

/// A history window `(P, N, C)` and the following target slice `(S, N, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    /// Index of the first history step in the source tensor.
    pub start: usize,
    pub history: Array3<f64>,
    pub target: Array3<f64>,
    pub calendar: Vec<CalendarRow>,
}

impl WindowedSample {
    /// The calendar row of the last history step (the forecast anchor).
    pub fn anchor(&self) -> CalendarRow {
        *self.calendar.last().expect("windows have at least one history step")
    }

    pub fn lookback(&self) -> usize {
        self.history.dim().0
    }

    pub fn horizon(&self) -> usize {
        self.target.dim().0
    }
}

/// Chronological split lengths: `floor(T * ratio)` for validation and test,
/// the remainder for training. Each part must hold at least `min_len` steps.
pub fn split_lengths(total: usize, ratios: [f64; 3], min_len: usize) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !r.is_finite() || *r <= 0.0) {
        return Err(Error::param(format!("split ratios must be positive, got {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("split ratios sum to {sum}, expected 1")));
    }
    let part = |r: f64| (total as f64 * r + 1e-9).floor() as usize;
    let valid = part(ratios[1]);
    let test = part(ratios[2]);
    let train = total.saturating_sub(valid + test);
    let lens = [train, valid, test];
    if let Some(i) = lens.iter().position(|&l| l < min_len.max(1)) {
        let name = ["train", "valid", "test"][i];
        return Err(Error::TooShort(format!(
            "{name} split holds {} steps, need at least {}",
            lens[i],
            min_len.max(1)
        )));
    }
    Ok(lens)
}

/// Index ranges of the three chronological splits.
pub fn split_ranges(total: usize, ratios: [f64; 3], min_len: usize) -> Result<[Range<usize>; 3]> {
    let [a, b, c] = split_lengths(total, ratios, min_len)?;
    Ok([0..a, a..a + b, a + b..a + b + c])
}

/// Splits a series into contiguous, non-overlapping (train, valid, test)
/// parts. `min_len` is the shortest admissible split, normally `P + S`.
pub fn split_dataset(
    series: &SeriesTensor,
    ratios: [f64; 3],
    min_len: usize,
) -> Result<(SeriesTensor, SeriesTensor, SeriesTensor)> {
    let [a, b, c] = split_ranges(series.len(), ratios, min_len)?;
    Ok((series.slice_time(a), series.slice_time(b), series.slice_time(c)))
}

/// Stride-1 windows: `T - P - S + 1` samples ordered by start time. The
/// target is channel 0 of the steps right after each history window.
pub fn make_windows(
    series: &SeriesTensor,
    calendar: &CalendarFrame,
    lookback: usize,
    horizon: usize,
) -> Result<Vec<WindowedSample>> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::param("lookback and horizon must be at least 1"));
    }
    let t = series.len();
    if calendar.len() != t {
        return Err(Error::shape(format!("calendar has {} rows, series {}", calendar.len(), t)));
    }
    if t < lookback + horizon {
        return Err(Error::TooShort(format!(
            "series of length {t} cannot hold a window of {lookback} + {horizon} steps"
        )));
    }
    let v = series.values();
    let count = t - lookback - horizon + 1;
    Ok((0..count)
        .map(|start| {
            let end = start + lookback;
            WindowedSample {
                start,
                history: v.slice(s![start..end, .., ..]).to_owned(),
                target: v.slice(s![end..end + horizon, .., 0..1]).to_owned(),
                calendar: (start..end)
                    .map(|i| CalendarRow {
                        hour: calendar.hour_of_day[i],
                        dow: calendar.day_of_week[i],
                        holiday: calendar.holiday_flag[i],
                    })
                    .collect(),
            }
        })
        .collect())
}
