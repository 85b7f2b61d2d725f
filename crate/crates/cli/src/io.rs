//! CSV formats: charging series, adjacency, holidays, exogenous features,
//! column maps.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use evstllm_core::domain::{CalendarFrame, SeriesTensor, StationGraph};
use ndarray::Array2;

use crate::config::SeriesKind;
use crate::error::{CliError, CliResult};

pub const TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim().trim_end_matches('Z');
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

fn reader(path: &Path) -> CliResult<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| CliError::io(path, e))
}

fn writer(path: &Path) -> CliResult<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))
}

/// Timestamped numeric table: first column time, one column per header.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeTable {
    pub columns: Vec<String>,
    pub timestamps: Vec<NaiveDateTime>,
    /// `(T, columns)`.
    pub values: Array2<f64>,
}

pub fn read_time_table(path: &Path) -> CliResult<TimeTable> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| CliError::io(path, e))?.clone();
    if header.len() < 2 {
        return Err(CliError::Data(format!("{}: need a timestamp column and at least one value column", path.display())));
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut timestamps = Vec::new();
    let mut flat = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        if rec.len() != header.len() {
            return Err(CliError::Data(format!("{} row {row}: {} cells, header has {}", path.display(), rec.len(), header.len())));
        }
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| CliError::Data(format!("{} row {row}: bad timestamp {:?}", path.display(), &rec[0])))?;
        timestamps.push(ts);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            if cell.is_empty() {
                return Err(CliError::Data(format!("{} row {row}: missing value for {}", path.display(), columns[j])));
            }
            let v: f64 = cell.parse().map_err(|_| {
                CliError::Data(format!("{} row {row}: non-numeric value {cell:?} for {}", path.display(), columns[j]))
            })?;
            if !v.is_finite() {
                return Err(CliError::Data(format!("{} row {row}: non-finite value for {}", path.display(), columns[j])));
            }
            flat.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(CliError::Data(format!("{}: no data rows", path.display())));
    }
    let values = Array2::from_shape_vec((timestamps.len(), columns.len()), flat).expect("rectangular table");
    Ok(TimeTable { columns, timestamps, values })
}

pub fn write_time_table(path: &Path, table: &TimeTable) -> CliResult<()> {
    let mut w = writer(path)?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(table.columns.iter().cloned());
    w.write_record(&header).map_err(|e| CliError::io(path, e))?;
    for (t, row) in table.timestamps.iter().zip(table.values.rows()) {
        let mut rec = vec![t.format(TIME_FORMAT).to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Raw header to station id.
pub fn load_column_map(path: &Path) -> CliResult<Vec<(String, String)>> {
    let mut rdr = reader(path)?;
    let mut map = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        if rec.len() != 2 {
            return Err(CliError::Data(format!("{}: column map rows need exactly two cells", path.display())));
        }
        map.push((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(map)
}

#[derive(Debug, Clone)]
pub struct ChargingData {
    pub ids: Vec<String>,
    /// `(T, N, 1)`.
    pub series: SeriesTensor,
    pub calendar: CalendarFrame,
    pub notices: Vec<String>,
}

fn check_stride(path: &Path, ts: &[NaiveDateTime]) -> CliResult<()> {
    for (i, w) in ts.windows(2).enumerate() {
        if w[1] - w[0] != chrono::TimeDelta::hours(1) {
            let what = if w[1] == w[0] { "duplicate timestamp" } else { "timestamp stride is not one hour" };
            // Row numbers count the header as row 1.
            return Err(CliError::Data(format!("{} row {}: {what} ({} after {})", path.display(), i + 3, w[1], w[0])));
        }
    }
    Ok(())
}

/// Loads an hourly station table. With a column map, mapped headers are
/// renamed and unmapped ones dropped.
pub fn load_charging_csv(path: &Path, kind: SeriesKind, column_map: Option<&[(String, String)]>) -> CliResult<ChargingData> {
    let mut table = read_time_table(path)?;
    check_stride(path, &table.timestamps)?;
    if let Some(map) = column_map {
        let lookup: HashMap<&str, &str> = map.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let keep: Vec<usize> = (0..table.columns.len()).filter(|&j| lookup.contains_key(table.columns[j].as_str())).collect();
        if keep.is_empty() {
            return Err(CliError::Data(format!("{}: no column matches the column map", path.display())));
        }
        table.values = table.values.select(ndarray::Axis(1), &keep);
        table.columns = keep.iter().map(|&j| lookup[table.columns[j].as_str()].to_string()).collect();
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = table.columns.iter().find(|c| !seen.insert(c.as_str())) {
        return Err(CliError::Data(format!("{}: station id {dup:?} appears twice", path.display())));
    }
    let mut notices = Vec::new();
    if kind == SeriesKind::Occupancy {
        let out = table.values.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        if out > 0 {
            notices.push(format!("warning: {out} occupancy values outside [0, 1] in {}", path.display()));
        }
    }
    let calendar = CalendarFrame::from_timestamps(table.timestamps)?;
    Ok(ChargingData { ids: table.columns, series: SeriesTensor::from_matrix(table.values)?, calendar, notices })
}

pub fn write_charging_csv(path: &Path, ids: &[String], calendar: &CalendarFrame, values: &Array2<f64>) -> CliResult<()> {
    write_time_table(path, &TimeTable { columns: ids.to_vec(), timestamps: calendar.timestamps().to_vec(), values: values.clone() })
}

/// Square 0/1 matrix with station ids on both the header row and the first
/// column, realigned to `ids`. A missing self-loop is added with a notice.
pub fn load_adjacency_csv(path: &Path, ids: &[String]) -> CliResult<(StationGraph, Vec<String>)> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|e| CliError::io(path, e))?.clone();
    let cols: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut rows: Vec<(String, Vec<u8>)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        if rec.len() != header.len() {
            return Err(CliError::Data(format!("{} row {}: {} cells, header has {}", path.display(), i + 2, rec.len(), header.len())));
        }
        let vals = rec
            .iter()
            .skip(1)
            .map(|c| match c {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(CliError::Data(format!("{} row {}: non-binary entry {other:?}", path.display(), i + 2))),
            })
            .collect::<CliResult<Vec<u8>>>()?;
        rows.push((rec[0].to_string(), vals));
    }
    if rows.len() != cols.len() {
        return Err(CliError::Data(format!("{}: {} rows for {} columns", path.display(), rows.len(), cols.len())));
    }
    let col_pos: HashMap<&str, usize> = cols.iter().enumerate().map(|(j, c)| (c.as_str(), j)).collect();
    let row_pos: HashMap<&str, usize> = rows.iter().enumerate().map(|(i, (c, _))| (c.as_str(), i)).collect();
    for id in cols.iter().chain(rows.iter().map(|(c, _)| c)) {
        if !ids.contains(id) {
            return Err(CliError::Data(format!("{}: unknown station id {id:?}", path.display())));
        }
    }
    let n = ids.len();
    let mut a = Array2::<u8>::zeros((n, n));
    for (i, a_id) in ids.iter().enumerate() {
        for (j, b_id) in ids.iter().enumerate() {
            let (Some(&r), Some(&c)) = (row_pos.get(a_id.as_str()), col_pos.get(b_id.as_str())) else {
                return Err(CliError::Data(format!("{}: station {a_id:?} or {b_id:?} missing", path.display())));
            };
            a[[i, j]] = rows[r].1[c];
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            if a[[i, j]] != a[[j, i]] {
                return Err(CliError::Data(format!(
                    "{}: asymmetric entry between {} and {} (indices {i}, {j})",
                    path.display(),
                    ids[i],
                    ids[j]
                )));
            }
        }
    }
    let mut notices = Vec::new();
    let missing: Vec<&str> = (0..n).filter(|&i| a[[i, i]] == 0).map(|i| ids[i].as_str()).collect();
    if !missing.is_empty() {
        notices.push(format!("notice: added self-loops for {}", missing.join(", ")));
        for i in 0..n {
            a[[i, i]] = 1;
        }
    }
    Ok((StationGraph::new(ids.to_vec(), a)?, notices))
}

pub fn write_adjacency_csv(path: &Path, graph: &StationGraph) -> CliResult<()> {
    let mut w = writer(path)?;
    let mut header = vec!["station".to_string()];
    header.extend(graph.node_ids().iter().cloned());
    w.write_record(&header).map_err(|e| CliError::io(path, e))?;
    for (id, row) in graph.node_ids().iter().zip(graph.adjacency().rows()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn load_holidays(path: &Path) -> CliResult<BTreeSet<NaiveDate>> {
    let mut rdr = reader(path)?;
    let mut dates = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let d = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|_| CliError::Data(format!("{} row {}: bad date {:?}", path.display(), i + 2, &rec[0])))?;
        dates.insert(d);
    }
    Ok(dates)
}

pub fn write_holidays(path: &Path, dates: &BTreeSet<NaiveDate>) -> CliResult<()> {
    let mut w = writer(path)?;
    w.write_record(["date"]).map_err(|e| CliError::io(path, e))?;
    for d in dates {
        w.write_record([d.format("%Y-%m-%d").to_string()]).map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// An exogenous feature aligned to the series: named after the file stem,
/// `(T, N)`. A file with one value column applies to every station;
/// otherwise its columns must name the stations.
pub fn load_exogenous(path: &Path, calendar: &CalendarFrame, ids: &[String]) -> CliResult<(String, Array2<f64>)> {
    let table = read_time_table(path)?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "exogenous".into());
    let rows: HashMap<NaiveDateTime, usize> = table.timestamps.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let broadcast = table.columns.len() == 1;
    let cols: Vec<usize> = if broadcast {
        vec![0; ids.len()]
    } else {
        ids.iter()
            .map(|id| {
                table.columns.iter().position(|c| c == id).ok_or_else(|| {
                    CliError::Data(format!("{}: no column for station {id:?}", path.display()))
                })
            })
            .collect::<CliResult<_>>()?
    };
    let mut out = Array2::zeros((calendar.len(), ids.len()));
    for (t, ts) in calendar.timestamps().iter().enumerate() {
        let r = *rows.get(ts).ok_or_else(|| CliError::Data(format!("{}: no row for {ts}", path.display())))?;
        for (n, &c) in cols.iter().enumerate() {
            out[[t, n]] = table.values[[r, c]];
        }
    }
    Ok((name, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_small_series() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.csv", "time,a,b\n2023-01-01 00:00:00,1,2\n2023-01-01T01:00,3,4.5\n2023-01-01 02:00:00,5,6\n");
        let d = load_charging_csv(&p, SeriesKind::Volume, None).unwrap();
        assert_eq!(d.series.values().dim(), (3, 2, 1));
        assert_eq!(d.series.values()[[1, 1, 0]], 4.5);
        assert_eq!(d.ids, ["a", "b"]);
        assert_eq!(d.calendar.hour_of_day(), &[0, 1, 2]);
    }

    #[test]
    fn rejects_gaps_duplicates_and_bad_cells() {
        let dir = tempfile::tempdir().unwrap();
        let gap = write(dir.path(), "g.csv", "t,a\n2023-01-01 00:00:00,1\n2023-01-01 01:00:00,1\n2023-01-01 03:00:00,1\n");
        let err = load_charging_csv(&gap, SeriesKind::Volume, None).unwrap_err().to_string();
        assert!(err.contains("row 4"), "{err}");
        let dup = write(dir.path(), "d.csv", "t,a\n2023-01-01 00:00:00,1\n2023-01-01 00:00:00,1\n");
        assert!(load_charging_csv(&dup, SeriesKind::Volume, None).unwrap_err().to_string().contains("duplicate"));
        let text = write(dir.path(), "x.csv", "t,a\n2023-01-01 00:00:00,abc\n");
        assert!(matches!(load_charging_csv(&text, SeriesKind::Volume, None), Err(CliError::Data(_))));
        let missing = write(dir.path(), "m.csv", "t,a,b\n2023-01-01 00:00:00,1,\n");
        assert!(load_charging_csv(&missing, SeriesKind::Volume, None).unwrap_err().to_string().contains("missing"));
    }

    #[test]
    fn occupancy_range_warning() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "o.csv", "t,a\n2023-01-01 00:00:00,0.5\n2023-01-01 01:00:00,1.7\n");
        assert!(load_charging_csv(&p, SeriesKind::Volume, None).unwrap().notices.is_empty());
        let d = load_charging_csv(&p, SeriesKind::Occupancy, None).unwrap();
        assert_eq!(d.notices.len(), 1);
    }

    #[test]
    fn column_map_renames_and_drops() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.csv", "t,raw1,junk,raw2\n2023-01-01 00:00:00,1,9,2\n");
        let map = vec![("raw2".to_string(), "s2".to_string()), ("raw1".to_string(), "s1".to_string())];
        let d = load_charging_csv(&p, SeriesKind::Volume, Some(&map)).unwrap();
        assert_eq!(d.ids, ["s1", "s2"]);
        assert_eq!(d.series.values()[[0, 1, 0]], 2.0);
    }

    #[test]
    fn adjacency_alignment_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let ids = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let p = write(dir.path(), "adj.csv", "id,c,a,b\nb,0,1,0\nc,1,1,0\na,1,1,1\n");
        let (g, notices) = load_adjacency_csv(&p, &ids).unwrap();
        // Rows/columns reordered to a, b, c; b's and c's missing self-loops added.
        assert_eq!(g.adjacency(), &ndarray::array![[1, 1, 1], [1, 1, 0], [1, 0, 1]]);
        assert_eq!(notices.len(), 1);
        let eye = write(dir.path(), "eye.csv", "id,a,b,c\na,1,0,0\nb,0,1,0\nc,0,0,1\n");
        assert_eq!(load_adjacency_csv(&eye, &ids).unwrap().0.adjacency(), StationGraph::identity(3).adjacency());
        let asym = write(dir.path(), "asym.csv", "id,a,b,c\na,1,1,0\nb,0,1,0\nc,0,0,1\n");
        let err = load_adjacency_csv(&asym, &ids).unwrap_err().to_string();
        assert!(err.contains("asymmetric") && err.contains("0, 1"), "{err}");
        let unknown = write(dir.path(), "u.csv", "id,a,b,z\na,1,0,0\nb,0,1,0\nz,0,0,1\n");
        assert!(load_adjacency_csv(&unknown, &ids).unwrap_err().to_string().contains("unknown"));
        let weighted = write(dir.path(), "w.csv", "id,a,b,c\na,1,0.5,0\nb,0.5,1,0\nc,0,0,1\n");
        assert!(load_adjacency_csv(&weighted, &ids).unwrap_err().to_string().contains("non-binary"));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cal = CalendarFrame::hourly(parse_timestamp("2023-03-01 05:00:00").unwrap(), 4).unwrap();
        let ids = vec!["x".to_string(), "y".to_string()];
        let values = Array2::from_shape_fn((4, 2), |(t, n)| (t as f64 + 0.1) / 3.0 - n as f64 * 1e-17);
        let p = dir.path().join("s.csv");
        write_charging_csv(&p, &ids, &cal, &values).unwrap();
        let back = load_charging_csv(&p, SeriesKind::Volume, None).unwrap();
        assert_eq!(back.series.values().index_axis(ndarray::Axis(2), 0), values);
        assert_eq!(back.calendar, cal);

        let g = StationGraph::new(ids.clone(), ndarray::array![[1, 1], [1, 1]]).unwrap();
        let pa = dir.path().join("a.csv");
        write_adjacency_csv(&pa, &g).unwrap();
        assert_eq!(load_adjacency_csv(&pa, &ids).unwrap().0, g);

        let dates: BTreeSet<NaiveDate> = [NaiveDate::from_ymd_opt(2023, 1, 22).unwrap()].into();
        let ph = dir.path().join("h.csv");
        write_holidays(&ph, &dates).unwrap();
        assert_eq!(load_holidays(&ph).unwrap(), dates);
    }

    #[test]
    fn exogenous_broadcast_and_join() {
        let dir = tempfile::tempdir().unwrap();
        let cal = CalendarFrame::hourly(parse_timestamp("2023-01-01 01:00").unwrap(), 2).unwrap();
        let ids = vec!["a".to_string(), "b".to_string()];
        let p = write(dir.path(), "price.csv", "t,p\n2023-01-01 00:00:00,1\n2023-01-01 01:00:00,2\n2023-01-01 02:00:00,3\n");
        let (name, v) = load_exogenous(&p, &cal, &ids).unwrap();
        assert_eq!(name, "price");
        assert_eq!(v, ndarray::array![[2.0, 2.0], [3.0, 3.0]]);
        let q = write(dir.path(), "temp.csv", "t,b,a\n2023-01-01 01:00:00,1,2\n2023-01-01 02:00:00,3,4\n");
        assert_eq!(load_exogenous(&q, &cal, &ids).unwrap().1, ndarray::array![[2.0, 1.0], [4.0, 3.0]]);
        let short = write(dir.path(), "s.csv", "t,p\n2023-01-01 01:00:00,1\n");
        assert!(load_exogenous(&short, &cal, &ids).is_err());
    }
}
