use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde_json::Value;

const SMALL: &str = "seed = 11\n\n[model]\nd_model = 8\n\n[train]\nmax_epochs = 2\n\n[pretrain]\nstations = 4\ndays = 14\nepochs = 1\n";

struct Workspace {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        let config = dir.join("small.toml");
        std::fs::write(&config, SMALL).unwrap();
        Self { _tmp: tmp, dir, config }
    }

    fn path(&self, name: &str) -> String {
        self.dir.join(name).display().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_evstllm"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out-dir")
            .arg(&self.dir)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    /// Runs `cmd` over the synthetic inputs in this workspace.
    fn on_inputs(&self, extra: &[&str], cmd: &str) -> Output {
        let files = [
            ("--series", "series.csv"),
            ("--adjacency", "adjacency.csv"),
            ("--holidays", "holidays.csv"),
            ("--exogenous", "temperature.csv"),
            ("--exogenous", "price.csv"),
        ];
        let mut args: Vec<String> = files.iter().flat_map(|(f, p)| [f.to_string(), self.path(p)]).collect();
        args.extend(extra.iter().map(|s| s.to_string()));
        args.push(cmd.to_string());
        self.run(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }

    fn ok_on_inputs(&self, extra: &[&str], cmd: &str) {
        let out = self.on_inputs(extra, cmd);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.dir.join(name)).unwrap()
    }
}

fn read_table(path: &Path) -> (Vec<String>, Vec<String>, Vec<Vec<f64>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().skip(1).map(str::to_string).collect();
    let mut stamps = Vec::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        stamps.push(rec[0].to_string());
        rows.push(rec.iter().skip(1).map(|v| v.parse().unwrap()).collect());
    }
    (header, stamps, rows)
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn noiseless_synth_follows_its_manifest() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--stations", "5", "--days", "28", "--noise", "0"]);
    let m: Value = serde_json::from_str(&ws.read("manifest.json")).unwrap();
    let adj: Vec<Vec<u64>> =
        m["adjacency"].as_array().unwrap().iter().map(|r| r.as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect()).collect();
    let (base, daily, phase) = (floats(&m["base"]), floats(&m["daily"]), floats(&m["phase"]));
    let (period, offset) = (floats(&m["period"]), floats(&m["offset"]));
    let (weekly, shared, depth) = (m["weekly"].as_f64().unwrap(), m["shared"].as_f64().unwrap(), m["holiday_depth"].as_f64().unwrap());
    let lag = m["lag"].as_u64().unwrap() as f64;
    let holidays: Vec<NaiveDate> =
        m["config"]["holidays"].as_array().unwrap().iter().map(|d| d.as_str().unwrap().parse().unwrap()).collect();

    let (ids, stamps, rows) = read_table(&ws.dir.join("series.csv"));
    assert_eq!(ids.len(), 5);
    assert_eq!(rows.len(), 28 * 24);
    for (t, (stamp, row)) in stamps.iter().zip(&rows).enumerate() {
        let ts = NaiveDateTime::parse_from_str(stamp, "%Y-%m-%d %H:%M:%S").unwrap();
        let hour = ts.hour() as f64;
        let dow = ts.weekday().num_days_from_monday() as f64;
        let off = if holidays.contains(&ts.date()) { 1.0 - depth } else { 1.0 };
        let wave = |j: usize, at: f64| (2.0 * PI * at / period[j] + offset[j]).sin();
        for i in 0..5 {
            let neighbors: Vec<usize> = (0..5).filter(|&j| j != i && adj[i][j] == 1).collect();
            let spread = wave(i, t as f64)
                + neighbors.iter().map(|&j| wave(j, t as f64 - lag)).sum::<f64>() / neighbors.len() as f64;
            let level = (base[i] + daily[i] * (2.0 * PI * (hour + phase[i]) / 24.0).sin()) * (1.0 + weekly * (2.0 * PI * dow / 7.0).cos());
            let want = ((level + shared * spread) * off).max(0.0);
            assert!((row[i] - want).abs() <= 1e-9 * want.abs().max(1.0), "t {t} station {i}: {} vs {want}", row[i]);
        }
    }
}

#[test]
fn exit_codes_follow_error_kind() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--stations", "4", "--days", "21"]);

    std::fs::write(ws.dir.join("bad.toml"), "[vmd]\nmodez = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_evstllm")).args(["--config", &ws.path("bad.toml"), "decompose"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let missing = ws.run(&["--series", &ws.path("nope.csv"), "decompose"]);
    assert_eq!(missing.status.code(), Some(3));

    let adj = ws.read("adjacency.csv");
    let mut cells: Vec<Vec<String>> = adj.lines().map(|l| l.split(',').map(str::to_string).collect()).collect();
    let flipped = if cells[1][2] == "1" { "0" } else { "1" };
    cells[1][2] = flipped.to_string();
    let text: String = cells.iter().map(|r| r.join(",") + "\n").collect();
    std::fs::write(ws.dir.join("asym.csv"), text).unwrap();
    let asym = ws.run(&["--series", &ws.path("series.csv"), "--adjacency", &ws.path("asym.csv"), "decompose"]);
    assert_eq!(asym.status.code(), Some(3), "{}", String::from_utf8_lossy(&asym.stderr));
    assert!(String::from_utf8_lossy(&asym.stderr).contains("symmetric"));

    std::fs::write(ws.dir.join("hot.toml"), SMALL.replace("[pretrain]\n", "[pretrain]\nlearning_rate = 1e200\n"))
        .unwrap();
    let hot = Command::new(env!("CARGO_BIN_EXE_evstllm"))
        .args(["--config", &ws.path("hot.toml"), "--out-dir", &ws.path("hot"), "pretrain"])
        .output()
        .unwrap();
    assert_eq!(hot.status.code(), Some(4), "{}", String::from_utf8_lossy(&hot.stderr));
}

#[test]
fn dumped_components_sum_to_the_denoised_series() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--stations", "3", "--days", "14"]);
    ws.ok_on_inputs(&["--dump"], "decompose");
    for id in ["S01", "S02", "S03"] {
        let (_, _, bands) = read_table(&ws.dir.join(format!("decompose/{id}_bands.csv")));
        let (_, _, modes) = read_table(&ws.dir.join(format!("decompose/{id}_modes.csv")));
        let (_, _, comps) = read_table(&ws.dir.join(format!("decompose/{id}_components.csv")));
        for ((b, m), c) in bands.iter().zip(&modes).zip(&comps) {
            let denoised = b[0];
            let tol = 1e-9 * denoised.abs().max(1.0);
            assert!((b[1] + b[2] + b[3] - denoised).abs() <= tol);
            assert!((m.iter().sum::<f64>() - denoised).abs() <= tol);
            assert!((c.iter().sum::<f64>() - denoised).abs() <= tol);
        }
    }
    let summary: Value = serde_json::from_str(&ws.read("decompose/summary.json")).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 3);
}

#[test]
fn training_is_reproducible_and_schedule_free() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--stations", "4", "--days", "21"]);
    ws.ok(&["pretrain"]);
    let backbone = ws.path("backbone.json");
    ws.ok_on_inputs(&["--backbone", &backbone], "train");
    let first = ws.read("model.json");
    ws.ok_on_inputs(&["--backbone", &backbone], "train");
    assert_eq!(first, ws.read("model.json"));
    ws.ok_on_inputs(&["--backbone", &backbone, "--sequential"], "train");
    assert_eq!(first, ws.read("model.json"));

    ws.ok_on_inputs(&[], "evaluate");
    let metrics: Value = serde_json::from_str(&ws.read("metrics.json")).unwrap();
    assert!(metrics["model"]["aggregate"]["mae"].as_f64().unwrap().is_finite());
    assert_eq!(metrics["horizon"].as_u64(), Some(3));

    ws.ok_on_inputs(&[], "forecast");
    let (cols, stamps, rows) = read_table(&ws.dir.join("forecast.csv"));
    assert_eq!((cols.len(), rows.len()), (4, 3));
    assert!(stamps[0].starts_with("2023-01-22 00:00"), "{}", stamps[0]);
}

#[test]
fn granulate_and_select_write_their_tables() {
    let ws = Workspace::new();
    ws.ok(&["synth", "--stations", "3", "--days", "14"]);
    ws.ok_on_inputs(&[], "granulate");
    let (cols, _, rows) = read_table(&ws.dir.join("granulate/S02_w24.csv"));
    assert_eq!(rows.len(), 14);
    assert_eq!(cols.len(), 3);
    assert!(rows.iter().all(|r| r[0] <= r[1] && r[1] <= r[2]));
    ws.ok_on_inputs(&[], "select");
    let weights = ws.read("select/weights.csv");
    assert!(weights.contains("temperature") && weights.contains("price"), "{weights}");
}
